import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affinekit import autodiff as ad
from affinekit.autodiff import DimensionError, GraphConsumedError, Tensor, grad_check, precision


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_matmul_identity_and_hand_values():
    assert np.array_equal(ad.matmul(t64(np.eye(2)), t64([[2], [3]])).data, [[2], [3]])
    assert np.array_equal(ad.matmul(t64([[1, 2], [3, 4]]), t64([[5], [6]])).data, [[17], [39]])
    assert np.array_equal(ad.matmul(t64(np.zeros((2, 3))), t64([[1], [2], [3]])).data, np.zeros((2, 1)))


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 1\)"):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 1))))


def test_elementwise_examples():
    assert np.array_equal(ad.relu(t64([-1, 0, 2])).data, [0, 0, 2])
    assert np.array_equal((t64([1, 2]) + t64([3, 4])).data, [4, 6])
    assert np.array_equal((t64([2, 3]) * 0.0).data, [0, 0])


def test_relu_gradient_at_zero_is_zero():
    x = t64([-1.0, 0.0, 2.0], grad=True)
    ad.relu(x).sum().backward()
    assert np.array_equal(x.grad, [0, 0, 1])


def test_only_leading_broadcasting():
    a = t64(np.ones((4, 3)))
    assert (a + t64([1, 2, 3])).shape == (4, 3)
    assert (a + t64(np.ones((1, 3)))).shape == (4, 3)
    with pytest.raises(DimensionError):
        a + t64(np.ones((4, 1)))
    with pytest.raises(DimensionError):
        t64(np.ones((2, 1, 3))) * t64(np.ones((2, 5, 3)))


def test_softmax_examples():
    assert np.allclose(ad.softmax_lastdim(t64([0, 0])).data, [0.5, 0.5])
    big = ad.softmax_lastdim(t64([1000.0, 1000.0])).data
    assert np.allclose(big, [0.5, 0.5])
    # closed form: e^0 / (e^0 + 3) = 1/4
    assert np.allclose(ad.softmax_lastdim(t64([0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_layernorm_examples():
    one, zero = t64(np.ones(3)), t64(np.zeros(3))
    assert np.array_equal(ad.layernorm(t64([[2.0, 2.0, 2.0]]), one, zero).data, np.zeros((1, 3)))
    out = ad.layernorm(t64([1.0, -1.0]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [1, -1], atol=1e-10)
    b = t64([0.5, -2.0, 3.0])
    out = ad.layernorm(t64(np.random.default_rng(0).standard_normal((4, 3))), zero, b).data
    assert np.array_equal(out, np.broadcast_to(b.data, (4, 3)))


def test_backward_linear_and_independent_leaf():
    x = t64([1.0, -2.0, 3.0])
    a = t64([0.3, 0.1, 0.7], grad=True)
    other = t64([5.0], grad=True)
    loss = (a * x).sum() + other * 0.0
    loss.sum().backward()
    assert np.array_equal(a.grad, x.data)
    assert np.array_equal(other.grad, [0.0])


def test_backward_quadratic_matches_finite_differences():
    rng = np.random.default_rng(3)
    W0 = rng.standard_normal((3, 4))
    x0 = rng.standard_normal((4, 1))
    W = t64(W0, grad=True)
    y = ad.matmul(W, t64(x0))
    (ad.square(y).sum() * 0.5).backward()
    # oracle: central differences on the numpy loss
    h = 1e-6
    numeric = np.zeros_like(W0)
    f = lambda M: 0.5 * float(np.sum((M @ x0) ** 2))  # noqa: E731
    for idx in np.ndindex(W0.shape):
        Wp, Wm = W0.copy(), W0.copy()
        Wp[idx] += h
        Wm[idx] -= h
        numeric[idx] = (f(Wp) - f(Wm)) / (2 * h)
    rel = np.abs(W.grad - numeric) / np.maximum(1, np.abs(numeric))
    assert rel.max() < 1e-6
    assert np.allclose(W.grad, (W0 @ x0) @ x0.T)


def test_backward_twice_raises():
    a = t64([1.0, 2.0], grad=True)
    loss = ad.square(a).sum()
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_backward_needs_scalar():
    with pytest.raises(DimensionError):
        ad.square(t64([1.0, 2.0], grad=True)).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_output_raises():
    with pytest.raises(ad.NumericalError):
        t64([1e308]) * 1e10


def test_grad_check_quadratic_is_tight():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    A = A @ A.T
    x = t64(rng.standard_normal((4, 1)), grad=True)
    f = lambda: ad.matmul(ad.swap_last(x), ad.matmul(t64(A), x)).sum()  # noqa: E731
    assert grad_check(f, [x], h=1e-5) < 1e-9


def test_grad_check_relu_away_from_kink():
    x = t64([-0.7, 0.4, 1.3, -2.0], grad=True)
    w = t64([0.5, -1.0, 2.0, 0.25])
    assert grad_check(lambda: (ad.relu(x) * w).sum(), [x]) < 1e-4


def test_grad_check_rejects_bad_step_and_precision():
    x = t64([1.0], grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: ad.square(x).sum(), [x], h=1e-2)
    with pytest.raises(TypeError):
        grad_check(lambda: ad.square(y).sum(), [y := Tensor([1.0], requires_grad=True, dtype=np.float32)])


def test_precision_context_sets_default_dtype():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_im2col_matches_direct_convolution():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 5, 3))
    w = rng.standard_normal((3, 3, 3, 2))  # kh, kw, cin, cout
    cols = ad.im2col(t64(x), 3).data
    out = cols @ w.reshape(27, 2)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 5, 2))
    for i in range(4):
        for j in range(5):
            ref[:, i, j] = np.einsum("bhwc,hwco->bo", xp[:, i:i + 3, j:j + 3], w)
    assert np.allclose(out, ref)


# -- property tests over random small instances ------------------------------

shapes = st.tuples(st.integers(1, 4), st.integers(1, 5))


def _rand(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


UNARY = {
    "gelu": ad.gelu,
    "silu": ad.silu,
    "softmax": ad.softmax_lastdim,
    "square": ad.square,
    "transpose": lambda t: t.T,
    "sum_axis": lambda t: t.sum(axis=0),
    "mean_axis": lambda t: t.mean(axis=1, keepdims=True),
    "expand": lambda t: ad.expand(t.reshape(t.shape[0], 1, t.shape[1]), (t.shape[0], 3, t.shape[1])),
    "getitem": lambda t: t[:, :1],
    "take": lambda t: ad.take(t, [0, 0, t.shape[0] - 1], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=20, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2 ** 16))
def test_unary_ops_pass_grad_check(name, shape, seed):
    x = t64(_rand(seed, shape), grad=True)
    w = t64(_rand(seed + 1, np.shape(UNARY[name](t64(x.data)).data)))
    assert grad_check(lambda: (UNARY[name](x) * w).sum(), [x]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4), seed=st.integers(0, 2 ** 16))
def test_matmul_and_broadcast_add_pass_grad_check(m, k, n, seed):
    A = t64(_rand(seed, (2, m, k)), grad=True)
    B = t64(_rand(seed + 1, (k, n)), grad=True)
    c = t64(_rand(seed + 2, (n,)), grad=True)
    w = t64(_rand(seed + 3, (2, m, n)))
    assert grad_check(lambda: ((ad.matmul(A, B) + c) * w).sum(), [A, B, c]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2 ** 16))
def test_layernorm_passes_grad_check(shape, seed):
    x = t64(_rand(seed, (shape[0], shape[1] + 1)), grad=True)
    g = t64(_rand(seed + 1, (shape[1] + 1,)), grad=True)
    b = t64(_rand(seed + 2, (shape[1] + 1,)), grad=True)
    w = t64(_rand(seed + 3, x.shape))
    assert grad_check(lambda: (ad.layernorm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_im2col_and_concat_pass_grad_check(seed):
    x = t64(_rand(seed, (1, 3, 3, 2)), grad=True)
    y = t64(_rand(seed + 1, (1, 3, 3, 1)), grad=True)
    w = t64(_rand(seed + 2, (1, 3, 3, 27)))
    assert grad_check(lambda: (ad.im2col(ad.concat([x, y], axis=-1), 3) * w).sum(), [x, y]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2 ** 16))
def test_relu_away_from_kink_passes_grad_check(shape, seed):
    v = _rand(seed, shape)
    v = np.where(np.abs(v) < 0.05, 0.5, v)
    x = t64(v, grad=True)
    w = t64(_rand(seed + 1, shape))
    assert grad_check(lambda: (ad.relu(x) * w).sum(), [x]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(rows=st.integers(1, 5), cols=st.integers(2, 8), seed=st.integers(0, 2 ** 16), scale=st.floats(0.1, 50))
def test_softmax_and_layernorm_row_properties(rows, cols, seed, scale):
    x = t64(_rand(seed, (rows, cols)) * scale)
    assert np.allclose(ad.softmax_lastdim(x).data.sum(axis=-1), 1.0, atol=1e-6)
    y = ad.layernorm(x, t64(np.ones(cols)), t64(np.zeros(cols)), eps=1e-12).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=-1) - 1) < 1e-4)


def test_forward_backward_bit_deterministic():
    def run():
        rng = np.random.default_rng(7)
        W = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
        x = Tensor(rng.standard_normal((16, 5)))
        y = ad.gelu(ad.matmul(x, W.T))
        loss = ad.softmax_lastdim(y).sum(axis=0).mean() + ad.square(y).mean()
        loss.backward()
        return loss.data.tobytes(), W.grad.tobytes()

    assert run() == run()
