import numpy as np
import pytest

from mixunlearn import tensor as T
from mixunlearn.tensor import ShapeMismatch, Tensor

from helpers import check_grads, numeric_grad, rel_err


def test_matmul_shape_algebra():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    assert T.matmul(a, b).shape == (2, 2)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatch) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_elementwise_mismatch_error():
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_relu_definition():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_symmetry_and_normalization():
    out = T.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=0)
    rng = np.random.default_rng(0)
    z = T.softmax(Tensor(rng.normal(size=(50, 7)) * 10))
    assert np.all(np.abs(z.data.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(z.data > 0) and np.all(z.data < 1)


def test_square_derivative_and_constant():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0, abs=1e-12)

    x = Tensor(3.0, requires_grad=True)
    c = Tensor(5.0)
    (c * 2.0).backward()
    assert x.grad is None  # constants contribute nothing


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    y.backward()
    y.backward()
    assert x.grad == pytest.approx(8.0)
    x.zero_grad()
    (x * x).backward()
    assert x.grad == pytest.approx(4.0)


def test_no_grad_suppresses_graph():
    x = Tensor(2.0, requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y.is_leaf()


def test_mlp_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = np.asarray(rng.normal(size=(6, 5)))
    onehot = np.zeros((6, 4))
    onehot[np.arange(6), rng.integers(0, 4, 6)] = 1.0
    w1 = Tensor(rng.normal(size=(5, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=8) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 4)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)

    def loss():
        h = T.relu(T.matmul(Tensor(x), w1) + b1)
        logp = T.log_softmax(T.matmul(h, w2) + b2)
        return -T.tsum(T.mul(logp, onehot)) / 6.0

    check_grads(loss, [w1, b1, w2, b2])


KERNEL_CASES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5)),
    "matmul": None,  # handled separately (shape)
}


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_kernel_gradients(name):
    op = KERNEL_CASES[name]
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        check_grads(lambda: T.tsum(T.mul(op(a, b), w)), [a, b])


@pytest.mark.parametrize(
    "name,unary",
    [
        ("relu", T.relu),
        ("sigmoid", T.sigmoid),
        ("exp", T.exp),
        ("log", lambda t: T.log(T.add(T.mul(t, t), 0.5))),
        ("softmax", lambda t: T.softmax(t, axis=-1)),
        ("log_softmax", lambda t: T.log_softmax(t, axis=-1)),
        ("l2norm", lambda t: T.l2norm(t, axis=-1)),
        ("sum_axis", lambda t: T.tsum(t, axis=-1)),
        ("mean", lambda t: T.tmean(t, axis=0)),
        ("reshape", lambda t: T.reshape(t, (4, 3))),
        ("logsumexp", lambda t: T.logsumexp(t)),
    ],
)
def test_unary_kernel_gradients(name, unary):
    for trial in range(20):
        rng = np.random.default_rng(hash(name) % 1000 + trial)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=np.asarray(unary(Tensor(x.data)).data).shape)
        check_grads(lambda: T.tsum(T.mul(unary(x), w)), [x])


def test_matmul_gradients():
    for trial in range(20):
        rng = np.random.default_rng(300 + trial)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        w = rng.normal(size=(3, 2))
        check_grads(lambda: T.tsum(T.mul(T.matmul(a, b), w)), [a, b])


def test_concat_gradients_and_split():
    rng = np.random.default_rng(9)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    w = rng.normal(size=(2, 8))
    check_grads(lambda: T.tsum(T.mul(T.concat([a, b], axis=1), w)), [a, b])


def test_conv2d_values_and_gradients():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    out = T.conv2d(x, w, b, padding="same")
    assert out.shape == (2, 4, 6, 6)
    # one output element against a hand sum
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    manual = (xp[0, :, 3:6, 4:7] * w.data[1]).sum() + b.data[1]
    assert out.data[0, 1, 3, 4] == pytest.approx(manual, rel=1e-12)
    assert T.conv2d(x, w, b, padding="valid").shape == (2, 4, 4, 4)
    w_out = rng.normal(size=(2, 4, 6, 6))
    check_grads(lambda: T.tsum(T.mul(T.conv2d(x, w, b, padding="same"), w_out)), [x, w, b])


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))


def test_maxpool_and_upsample_gradients():
    for trial in range(20):
        rng = np.random.default_rng(500 + trial)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w_p = rng.normal(size=(2, 3, 2, 2))
        check_grads(lambda: T.tsum(T.mul(T.maxpool2d(x), w_p)), [x])
        w_u = rng.normal(size=(2, 3, 8, 8))
        check_grads(lambda: T.tsum(T.mul(T.upsample2x(x), w_u)), [x])


def test_maxpool_values():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = T.maxpool2d(Tensor(x))
    assert np.array_equal(out.data[0, 0], [[5, 7], [13, 15]])


def test_cosine_similarity_examples():
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == pytest.approx(1.0, abs=1e-9)
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-12)
    got = T.cosine_similarity(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0])).item()
    assert got == pytest.approx(0.974631846, abs=1e-6)


def test_cosine_zero_vector_stabilized():
    out = T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))
    assert np.isfinite(out.item()) and out.item() == pytest.approx(0.0, abs=1e-6)


def test_cosine_rowwise_and_gradients():
    rng = np.random.default_rng(13)
    a = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    b = rng.normal(size=(4, 6))
    rows = T.cosine_similarity(a, Tensor(b), axis=-1)
    assert rows.shape == (4,)
    for k in range(4):
        expected = np.dot(a.data[k], b[k]) / (np.linalg.norm(a.data[k]) * np.linalg.norm(b[k]))
        assert rows.data[k] == pytest.approx(expected, rel=1e-9)
    w = rng.normal(size=4)
    check_grads(lambda: T.tsum(T.mul(T.cosine_similarity(a, Tensor(b), axis=-1), w)), [a])


def test_bias_broadcast_gradient():
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(5, 3)))
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w = rng.normal(size=(5, 3))
    check_grads(lambda: T.tsum(T.mul(T.add(x, b), w)), [b])


def test_topological_order_root_last():
    x = Tensor(1.0, requires_grad=True)
    y = x * 2.0
    z = y + x
    order = T.topo_order(z)
    assert order[-1] is z
    assert order.index(x) < order.index(y) < order.index(z)
