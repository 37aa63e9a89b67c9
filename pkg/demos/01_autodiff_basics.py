import numpy as np

from gradcell import autodiff as ad
from gradcell.autodiff import Parameter, RngStream, Tape

spacer = "_" * 60

print("A parameter and a small graph recorded on a tape")
w = Parameter(np.array([1.0, -2.0, 0.5]), name="w")
with Tape() as tape:
    loss = ad.sum_(ad.exp(w * 0.5))
print("loss =", float(loss.data))
print("ops on the tape:", [n.op for n in tape.nodes])

tape.backward(loss)
print("grad  =", w.grad)
print("check =", 0.5 * np.exp(0.5 * w.data))

print(spacer)

print("\nA second backward adds to the gradient instead of replacing it")
with Tape() as tape:
    loss = ad.sum_(ad.exp(w * 0.5))
tape.backward(loss)
print("grad after two passes =", w.grad)
ad.zero_grads([w])
print("after zero_grads      =", w.grad)

print(spacer)

print("\nno_grad records nothing, which is how the cache pass saves memory")
x = Parameter(np.random.default_rng(0).normal(size=(64, 16)), name="x")
with Tape("no_grad") as quiet:
    ad.gelu(ad.matmul(x, ad.transpose(x)))
with Tape() as loud:
    ad.gelu(ad.matmul(x, ad.transpose(x)))
print("no_grad tape:", len(quiet), "nodes,", quiet.activation_elements, "elements")
print("grad tape:   ", len(loud), "nodes,", loud.activation_elements, "elements")

print(spacer)

print("\nDropout masks are a pure function of (seed, stream, counter)")
ones = ad.Tensor(np.ones(12))
a = ad.dropout(ones, 0.5, RngStream(7, 1, 0)).data
b = ad.dropout(ones, 0.5, RngStream(7, 1, 0)).data
c = ad.dropout(ones, 0.5, RngStream(7, 1, 1)).data
print("replay  :", a)
print("replay  :", b)
print("next ctr:", c)

print(spacer)

print("\nOne Adam step from w=1 with grad 1 and lr 0.1 lands at about 0.9")
p = Parameter(np.array([1.0]), name="p")
p.grad[...] = 1.0
ad.Adam([p], lr=0.1).step()
print("p =", p.data)
