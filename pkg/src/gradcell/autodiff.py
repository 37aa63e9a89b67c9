"""Tape-based reverse-mode autodiff over dense numpy arrays.

Ops record themselves on the active :class:`Tape` only when the tape is in
grad mode and at least one input requires a gradient.  A tape opened with
``mode="no_grad"`` (or the :func:`no_grad` context) records nothing, which is
what lets the contrastive trainer embed a whole batch without holding
activations.

Example::

    w = Parameter(np.ones(3), name="w")
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # array([2., 2., 2.])
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericalError, UsageError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """The innermost tape, or None (a no_grad block pushes None)."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.

    ``activation_elements`` counts the array elements held alive by the
    record (op outputs plus extra saved buffers); it is the instrumented
    memory figure the memory model is checked against.
    """

    def __init__(self, mode="grad"):
        if mode not in ("grad", "no_grad"):
            raise UsageError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.nodes = []
        self.activation_elements = 0

    def __enter__(self):
        _tape_stack().append(self if self.mode == "grad" else None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node, saved_elements=0):
        self.nodes.append(node)
        self.activation_elements += node.out.data.size + saved_elements

    def backward(self, loss, grad=None):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.mode != "grad":
            raise UsageError("backward() called on a no_grad tape")
        if not isinstance(loss, Tensor):
            raise UsageError("loss must be a Tensor")
        if grad is None:
            if loss.data.ndim != 0:
                raise UsageError(f"loss must be 0-dimensional, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            loss._accumulate(grad)
            return
        grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp._accumulate(ig)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig


class no_grad:
    """Context manager that suspends recording on every enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def forward(graph_fn, *inputs, mode="grad"):
    """Run ``graph_fn(*inputs)`` on a fresh tape; return ``(outputs, tape)``."""
    with Tape(mode) as tape:
        out = graph_fn(*inputs)
    return out, tape


def backward(tape, loss):
    tape.backward(loss)


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """Dense array plus the bookkeeping needed for reverse mode."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = None

    @classmethod
    def _from_op(cls, data, op):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = True
        t.is_leaf = False
        t.grad = None
        t.op = op
        return t

    @classmethod
    def constant(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.is_leaf = True
        t.grad = None
        t.op = None
        return t

    def _accumulate(self, g):
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor.constant(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf whose ``grad`` is zero-initialised and only ever added to."""

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor.constant(np.asarray(x, dtype=dtype))


as_tensor = _wrap


def _make(op, out_data, inputs, backward_fn, saved_elements=0):
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(op)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out = Tensor._from_op(out_data, op)
        tape.record(_Node(op, inputs, out, backward_fn), saved_elements)
        return out
    return Tensor.constant(out_data)


# elementwise arithmetic ------------------------------------------------------

def add(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise UsageError("matmul expects operands with at least 2 dimensions")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), bw)


# unary ---------------------------------------------------------------------

def exp(x):
    x = _wrap(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = _wrap(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make("log", out, (x,), lambda g: (g / xd,))


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,),
                 lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    x = _wrap(x)
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return _make("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def elu(x, alpha=1.0):
    x = _wrap(x)
    xd = x.data
    mask = xd > 0
    neg = alpha * np.expm1(np.minimum(xd, 0.0))
    out = np.where(mask, xd, neg).astype(x.dtype)
    return _make("elu", out, (x,), lambda g: (g * np.where(mask, 1.0, neg + alpha),))


def gelu(x):
    """Exact (erf) GELU."""
    x = _wrap(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = (xd * cdf).astype(x.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make("gelu", out, (x,), bw)


def clip(x, lo, hi):
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sigmoid(x):
    x = _wrap(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = rstd / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                         - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return _make("layernorm", out, (x, gamma, beta), bw, saved_elements=xhat.size)


# reductions and shape ops ------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(x, axis=-1, keepdims=True):
    x = _wrap(x)
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(out == 0):
        raise NumericalError("l2_norm", "zero-norm vector")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xd / out,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _make("l2_norm", res, (x,), bw)


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    x = _wrap(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("slice", np.array(x.data[idx]), (x,), bw)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bw)


def gather(table, index):
    """Row lookup ``table[index]`` (embedding lookup)."""
    table = _wrap(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, index, g)
        return (gt,)

    return _make("gather", table.data[index], (table,), bw)


def scatter_rows(x, index, n_rows):
    """Place the rows of ``x`` at ``index`` in an ``n_rows``-row zero matrix."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    out[index] = x.data
    return _make("scatter_rows", out, (x,), lambda g: (g[index],))


# stochastic -------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: draws depend only on (seed, stream_id, counter)."""

    seed: int
    stream_id: int = 0
    counter: int = 0

    def generator(self):
        key = ((self.seed & (2**64 - 1)) << 64) | (self.stream_id & (2**64 - 1))
        bitgen = np.random.Philox(key=key, counter=[0, 0, 0, self.counter & (2**64 - 1)])
        return np.random.Generator(bitgen)

    def derive(self, *keys):
        """Child stream keyed by ``keys``; independent of this stream's counter."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little", signed=False))
        for k in keys:
            h.update(repr(k).encode())
            h.update(b"\x00")
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"), 0)

    def at(self, counter):
        return replace(self, counter=counter)


def dropout(x, p, rng):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = _wrap(x)
    if p == 0.0:
        return x
    keep = rng.generator().random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    return _make("dropout", x.data * scale, (x,), lambda g: (g * scale,),
                 saved_elements=scale.size)


# optimisation ---------------------------------------------------------------

def zero_grads(params):
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


class Adam:
    """Bias-corrected Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out

    def load_state_arrays(self, arrays, t):
        self.t = int(t)
        for i, p in enumerate(self.params):
            self.m[i][...] = arrays[f"adam.m.{p.name}"]
            self.v[i][...] = arrays[f"adam.v.{p.name}"]


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, state=None):
    """One Adam update; pass the returned optimizer back in to continue the recurrence."""
    opt = state if state is not None else Adam(params, lr, beta1, beta2, eps, weight_decay)
    opt.step(lr)
    return opt
