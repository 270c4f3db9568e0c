import numpy as np
import pytest

from mertlab import grad as G
from mertlab.grad import Tensor

TOL = 1e-5
rng = np.random.default_rng(0)


def weighted(t: Tensor, seed: int = 1) -> Tensor:
    """Scalar probe: sum of t times fixed random weights, so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return G.sum(t * Tensor(w))


def check(f, x, **kw):
    err = G.finite_diff_check(f, x, **kw)
    assert err <= TOL, err
    return err


# ---------------------------------------------------------------- analytic values


def test_chain_rule_scalar():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    z = y * y
    G.backward(z)
    assert x.grad == pytest.approx(4 * 27)


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    G.backward(G.sum(x + x + x))
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_matmul_grad_closed_form():
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    G.backward(G.sum(a @ b))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_softmax_rows_sum_to_one_and_log_softmax_consistent():
    x = Tensor(rng.normal(size=(5, 7)) * 30)
    s = G.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    np.testing.assert_allclose(np.exp(G.log_softmax(x).data), s, rtol=1e-12)


def test_layer_norm_moments():
    y = G.layer_norm(Tensor(rng.normal(3.0, 5.0, size=(4, 16)))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=1), 1.0, rtol=1e-6)


def test_cosine_similarity_values():
    a = Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))
    b = Tensor(np.array([[0.0, 2.0], [-3.0, -3.0]]))
    np.testing.assert_allclose(G.cosine_similarity(a, b).data, [0.0, -1.0], atol=1e-12)


def test_conv1d_matches_direct_sum():
    x = rng.normal(size=(2, 4, 11))
    w = rng.normal(size=(6, 2, 3))
    b = rng.normal(size=6)
    out = G.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=(1, 2), groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 2)))
    T = (xp.shape[2] - 3) // 2 + 1
    ref = np.zeros((2, 6, T))
    for o in range(6):
        g = o // 3
        for t in range(T):
            ref[:, o, t] = np.sum(xp[:, 2 * g : 2 * g + 2, 2 * t : 2 * t + 3] * w[o], axis=(1, 2)) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 9)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(G.gelu(Tensor(x)).data, ref, atol=1e-12)


def test_bce_with_logits_value():
    z = np.array([0.0, 2.0, -3.0])
    t = np.array([1.0, 0.0, 1.0])
    p = 1 / (1 + np.exp(-z))
    ref = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert float(G.bce_with_logits(Tensor(z), t).data) == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------- errors and modes


def test_shape_error_names_both_shapes():
    with pytest.raises(G.ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        G.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


def test_non_finite_raises():
    with pytest.raises(G.NonFiniteError):
        G.log(Tensor(np.array([-1.0])))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with G.no_grad():
        y = G.sum(x * x)
    assert not y.requires_grad


def test_dropout_identity_without_rng_and_scaled_with():
    x = Tensor(np.ones((200, 50)))
    assert G.dropout(x, 0.25, None) is x
    y = G.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs(y.mean() - 1.0) < 0.02


def test_backward_requires_scalar():
    with pytest.raises(G.ShapeError):
        G.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


# ---------------------------------------------------------------- finite differences, every op


UNARY = {
    "neg": lambda x: -x,
    "exp": lambda x: G.exp(x),
    "log": lambda x: G.log(G.exp(x) + 1.0),
    "relu": lambda x: G.relu(x),
    "gelu": lambda x: G.gelu(x),
    "sigmoid": lambda x: G.sigmoid(x),
    "sum_axis": lambda x: G.sum(x, axis=1),
    "mean_keepdims": lambda x: G.mean(x, axis=0, keepdims=True),
    "reshape": lambda x: G.reshape(x, (4, 3)),
    "transpose": lambda x: G.transpose(x),
    "getitem_slice": lambda x: x[1:, ::2],
    "getitem_fancy": lambda x: x[np.array([0, 2, 2, 1])],
    "softmax": lambda x: G.softmax(x, axis=-1),
    "log_softmax": lambda x: G.log_softmax(x, axis=0),
    "layer_norm": lambda x: G.layer_norm(x),
    "normalize": lambda x: G.normalize(x),
    "astype": lambda x: G.astype(x, np.float64),
    "gather_rows": lambda x: G.gather_rows(x, np.array([2, 0, 2])),
    "concat": lambda x: G.concat([x, x * 2.0], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_finite_difference(name):
    x = np.random.default_rng(3).normal(size=(3, 4))
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep away from the kink
    check(lambda t: weighted(UNARY[name](t)), x)


BINARY = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:1],
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ G.transpose(b),
    "cosine": lambda a, b: G.cosine_similarity(a, b),
    "mse": lambda a, b: G.mse(a, b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("side", [0, 1])
def test_binary_ops_finite_difference(name, side):
    r = np.random.default_rng(4)
    a = r.normal(size=(3, 4))
    b = r.normal(size=(3, 4))
    if side == 0:
        check(lambda t: weighted(BINARY[name](t, Tensor(b))), a)
    else:
        check(lambda t: weighted(BINARY[name](Tensor(a), t)), b)


def test_batched_matmul_finite_difference():
    r = np.random.default_rng(5)
    b = r.normal(size=(2, 4, 3))
    check(lambda t: weighted(t @ Tensor(b)), r.normal(size=(2, 5, 4)))


def test_bce_finite_difference():
    t = (np.random.default_rng(6).random((4, 3)) > 0.5).astype(float)
    check(lambda z: G.bce_with_logits(z, t), np.random.default_rng(7).normal(size=(4, 3)))


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, (1, 2), 2), (3, 2, 4), (1, 3, 4)])
def test_conv1d_finite_difference(stride, padding, groups):
    r = np.random.default_rng(8)
    x = r.normal(size=(2, 4, 13))
    w = r.normal(size=(8, 4 // groups, 3))
    bias = r.normal(size=8)
    check(lambda t: weighted(G.conv1d(t, Tensor(w), Tensor(bias), stride, padding, groups)), x)
    check(lambda t: weighted(G.conv1d(Tensor(x), t, Tensor(bias), stride, padding, groups)), w)
    check(lambda t: weighted(G.conv1d(Tensor(x), Tensor(w), t, stride, padding, groups)), bias)


def test_finite_diff_check_detects_wrong_gradient():
    x = np.array([1.0, 2.0])

    def broken(t):
        y = G.mul(t, t)
        y._backward = lambda g: (g * 3.0 * t.data, np.zeros_like(g))  # true factor is 2
        return G.sum(y)

    assert G.finite_diff_check(lambda t: G.sum(G.mul(t, t)), x) <= TOL
    assert G.finite_diff_check(broken, x) > 0.1
