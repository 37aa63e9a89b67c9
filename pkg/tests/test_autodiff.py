import numpy as np
import pytest

from gradcell import autodiff as ad
from gradcell.autodiff import Adam, Parameter, RngStream, Tape, Tensor, forward, no_grad
from gradcell.errors import ConfigError, NumericalError, UsageError

from helpers import gradcheck


def test_identity_no_grad_leaves_tape_empty():
    x = Parameter(np.array([1.0, 2.0]), name="x")
    out, tape = forward(lambda t: t, x, mode="no_grad")
    np.testing.assert_array_equal(out.data, [1.0, 2.0])
    assert len(tape) == 0


def test_square_gradient():
    x = Parameter(np.array(3.0), name="x")
    out, tape = forward(lambda t: t * t, x)
    tape.backward(out)
    assert x.grad == 6.0


def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert ad.matmul(a, b).shape == (2, 4)


def test_sum_gradient_and_accumulation():
    w = Parameter(np.zeros(3), name="w")
    for expected in ([1, 1, 1], [2, 2, 2]):
        with Tape() as tape:
            loss = w.sum()
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, expected)


def test_backward_on_no_grad_tape_raises():
    w = Parameter(np.ones(2), name="w")
    with Tape("no_grad") as tape:
        loss = w.sum()
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_backward_requires_scalar():
    w = Parameter(np.ones(2), name="w")
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_non_finite_fails_fast_with_op_name():
    x = Tensor(np.array([0.0, 1.0]))
    with pytest.raises(NumericalError, match="log"):
        ad.log(x)
    with pytest.raises(NumericalError, match="exp"):
        ad.exp(Tensor(np.array([1e4])))


def test_no_grad_records_nothing_and_matches_grad_mode():
    gen = np.random.default_rng(0)
    w = Parameter(gen.normal(size=(4, 4)), name="w")
    x = Tensor(gen.normal(size=(3, 4)))
    rng = RngStream(7, 3)

    def graph():
        h = ad.gelu(ad.matmul(x, w))
        return ad.dropout(h, 0.3, rng)

    with Tape("no_grad") as t0:
        a = graph()
    with Tape() as t1:
        b = graph()
    assert len(t0) == 0 and t0.activation_elements == 0
    assert len(t1) > 0
    np.testing.assert_array_equal(a.data, b.data)


def test_grad_accumulation_is_additive():
    gen = np.random.default_rng(1)
    w = Parameter(gen.normal(size=(3, 3)), name="w")
    x = Tensor(gen.normal(size=(2, 3)))

    def l1():
        return ad.sum_(ad.exp(ad.matmul(x, w) * 0.1))

    def l2():
        return ad.sum_(ad.softmax(ad.matmul(x, w)) * np.arange(3.0))

    grads = []
    for fn in (l1, l2):
        ad.zero_grads([w])
        with Tape() as t:
            loss = fn()
        t.backward(loss)
        grads.append(w.grad.copy())
    ad.zero_grads([w])
    for fn in (l1, l2):
        with Tape() as t:
            loss = fn()
        t.backward(loss)
    np.testing.assert_allclose(w.grad, grads[0] + grads[1], rtol=0, atol=1e-15)


def test_backward_visits_reverse_order():
    w = Parameter(np.ones(2), name="w")
    with Tape() as tape:
        a = w * 2.0
        b = ad.exp(a)
        loss = b.sum()
    ops = [n.op for n in tape.nodes]
    assert ops == ["mul", "exp", "sum"]
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * np.exp(2.0) * np.ones(2))


def test_two_layer_mlp_matches_finite_differences():
    gen = np.random.default_rng(2)
    w1 = Parameter(gen.normal(size=(5, 7)), name="w1")
    b1 = Parameter(gen.normal(size=7), name="b1")
    w2 = Parameter(gen.normal(size=(7, 3)), name="w2")
    b2 = Parameter(gen.normal(size=3), name="b2")
    x = Tensor(gen.normal(size=(4, 5)))
    y = gen.integers(0, 3, size=4)
    onehot = np.eye(3)[y]

    def build():
        h = ad.gelu(ad.matmul(x, w1) + b1)
        logp = ad.log_softmax(ad.matmul(h, w2) + b2)
        return ad.sum_(logp * onehot) * -0.25

    err, _ = gradcheck(build, [w1, b1, w2, b2], n_coords=50)
    assert err <= 1e-4


def _random_graph(seed):
    """Random composite of the op set; returns (build_fn, params)."""
    gen = np.random.default_rng(seed)
    n, k = int(gen.integers(2, 5)), int(gen.integers(2, 6))
    x0 = Tensor(gen.normal(size=(n, k)))
    w = Parameter(gen.normal(size=(k, k)) / np.sqrt(k), name="w")
    g = Parameter(1.0 + 0.1 * gen.normal(size=k), name="g")
    b = Parameter(0.1 * gen.normal(size=k), name="b")
    table = Parameter(gen.normal(size=(6, k)), name="table")
    rows = gen.integers(0, 6, size=n)
    proj = gen.normal(size=(n, k))
    rng = RngStream(seed, 11)
    steps = [
        lambda x: ad.matmul(x, w) + b,
        lambda x: ad.gelu(x),
        lambda x: ad.layernorm(x, g, b),
        lambda x: ad.softmax(x, axis=-1) * 3.0,
        lambda x: ad.log_softmax(x, axis=-1),
        lambda x: ad.exp(x * 0.2),
        lambda x: ad.log(x * x + 1.0),
        lambda x: x / ad.l2_norm(x + 0.5, axis=-1),
        lambda x: ad.sigmoid(x) - x * 0.1,
        lambda x: x + ad.gather(table, rows),
        lambda x: ad.transpose(ad.transpose(x) * 1.5),
        lambda x: ad.reshape(ad.reshape(x, (n * k,)) * 0.9, (n, k)),
        lambda x: ad.concat([x[:, :1] * 2.0, x[:, 1:]], axis=1),
        lambda x: x - ad.mean(x, axis=0, keepdims=True),
        lambda x: ad.dropout(x, 0.25, rng),
        lambda x: ad.elu(x) + ad.leaky_relu(x) * 0.5,
        lambda x: x * ad.sum_(x * x, axis=1, keepdims=True) * 0.1,
    ]
    chain = gen.choice(len(steps), size=int(gen.integers(4, 8)), replace=True)
    chain = [0, *chain]

    def build():
        x = x0
        for c in chain:
            x = steps[c](x)
        return ad.sum_(x * proj)

    return build, [w, g, b, table]


@pytest.mark.parametrize("seed", range(24))
def test_random_graph_gradients_match_finite_differences(seed):
    build, params = _random_graph(seed)
    err, name = gradcheck(build, params, n_coords=12, seed=seed)
    assert err <= 1e-4, (name, err)


def test_dropout_p_zero_is_identity():
    x = Tensor(np.arange(5.0))
    out = ad.dropout(x, 0.0, RngStream(123))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_replay():
    x = Tensor(np.ones(1000))
    a = ad.dropout(x, 0.4, RngStream(1, 2, 3))
    b = ad.dropout(x, 0.4, RngStream(1, 2, 3))
    c = ad.dropout(x, 0.4, RngStream(1, 2, 4))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_dropout_rate_and_scaling():
    x = Tensor(np.ones(10 ** 5))
    out = ad.dropout(x, 0.5, RngStream(9)).data
    assert abs(np.mean(out == 0) - 0.5) <= 0.01
    np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])


def test_dropout_rejects_p_one():
    with pytest.raises(ConfigError):
        ad.dropout(Tensor(np.ones(3)), 1.0, RngStream(0))


def test_rng_stream_is_pure():
    s = RngStream(5, 6, 7)
    np.testing.assert_array_equal(s.generator().random(10), s.generator().random(10))
    assert s.derive("a", 1) == s.derive("a", 1)
    assert s.derive("a", 1) != s.derive("a", 2)
    # counters address non-overlapping blocks
    assert not np.array_equal(s.at(0).generator().random(8), s.at(1).generator().random(8))


def test_zero_grads():
    w = Parameter(np.ones(3), name="w")
    w.grad += 5.0
    ad.zero_grads([w])
    np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_adam_first_step():
    # t=1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    w = Parameter(np.array([1.0]), name="w")
    w.grad[...] = 1.0
    opt = Adam([w], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step()
    np.testing.assert_allclose(w.data, [1.0 - 0.1 / (1.0 + 1e-8)], rtol=0, atol=1e-15)
    assert abs(w.data[0] - 0.9) < 1e-8


def test_adam_matches_hand_recurrence():
    gen = np.random.default_rng(0)
    w = Parameter(gen.normal(size=4), name="w")
    opt = Adam([w], lr=0.01, beta1=0.8, beta2=0.95, eps=1e-6, weight_decay=0.1)
    ref = w.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = gen.normal(size=4)
        w.grad[...] = g
        opt.step()
        g = g + 0.1 * ref
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        ref = ref - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-6)
    np.testing.assert_allclose(w.data, ref, rtol=1e-13)


def test_adam_update_independent_of_value_without_decay():
    grads = [np.array([0.3]), np.array([-0.2]), np.array([0.5])]
    deltas = []
    for start in (1.0, -40.0):
        w = Parameter(np.array([start]), name="w")
        opt = Adam([w], lr=0.05)
        for g in grads:
            w.grad[...] = g
            opt.step()
        deltas.append(w.data[0] - start)
    assert deltas[0] == pytest.approx(deltas[1], abs=1e-12)


def test_nested_no_grad_suspends_recording():
    w = Parameter(np.ones(2), name="w")
    with Tape() as tape:
        with no_grad():
            a = w * 2.0
        b = w * 3.0
    assert not a.requires_grad and b.requires_grad
    assert len(tape) == 1
