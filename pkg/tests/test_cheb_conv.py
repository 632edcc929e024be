import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from stochgcn.cheb_conv import (
    ChebLayer,
    cheb_backward,
    cheb_forward,
    chebyshev_basis,
    glorot_limit,
    graph_max_pool,
    graph_max_pool_backward,
    relu,
    relu_backward,
)
from stochgcn.errors import ContractViolationError, InvalidConfigError, InvalidInputError
from stochgcn.grid_graph import (
    GraphParams,
    build_stochastic_graph,
    normalized_laplacian,
    scale_laplacian,
)


def cycle_laplacian(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    lap = np.eye(n) - a / 2.0
    return scale_laplacian(sp.csr_matrix(lap), 2.0)


def random_laplacian(n, rng):
    a = rng.uniform(0.1, 1.0, size=(n, n)) * (rng.random((n, n)) < 0.5)
    a = np.triu(a, 1)
    a = a + a.T
    for i in range(n):  # keep every vertex attached
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = max(a[i, (i + 1) % n], 0.3)
    lap = normalized_laplacian(sp.csr_matrix(a))
    return scale_laplacian(lap, float(np.linalg.eigvalsh(lap.toarray()).max()))


def dense_oracle(lap_dense, x, weights, bias):
    """Sum of explicit T_k(L) matrices applied to x."""
    n = lap_dense.shape[0]
    t = [np.eye(n), lap_dense.copy()]
    for _ in range(2, weights.shape[0]):
        t.append(2 * lap_dense @ t[-1] - t[-2])
    return sum(t[k] @ x @ weights[k] for k in range(weights.shape[0])) + bias


def layer(rng, k, f_in, f_out, use_bias=True):
    return ChebLayer(rng.normal(size=(k, f_in, f_out)), rng.normal(size=f_out), use_bias)


# ---------------------------------------------------------------- forward

def test_order_one_is_affine_map():
    rng = np.random.default_rng(0)
    lay = layer(rng, 1, 3, 2)
    x = rng.normal(size=(8, 3))
    y, _ = cheb_forward(cycle_laplacian(8), x, lay)
    np.testing.assert_allclose(y, x @ lay.weights[0] + lay.bias, rtol=1e-14)


def test_order_two_hand_example():
    lap = sp.csr_matrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))
    lay = ChebLayer(np.ones((2, 1, 1)), np.zeros(1))
    y, _ = cheb_forward(lap, np.array([[1.0], [0.0]]), lay)
    np.testing.assert_array_equal(y, [[1.0], [-1.0]])


def test_order_four_cycle_matches_dense_oracle():
    rng = np.random.default_rng(1)
    lap = cycle_laplacian(8)
    lay = layer(rng, 4, 3, 5)
    x = rng.normal(size=(8, 3))
    y, _ = cheb_forward(lap, x, lay)
    ref = dense_oracle(lap.matrix.toarray(), x, lay.weights, lay.bias)
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 50), k=st.integers(1, 10), f_in=st.integers(1, 3),
       f_out=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_recurrence_matches_dense_oracle(n, k, f_in, f_out, seed):
    rng = np.random.default_rng(seed)
    lap = random_laplacian(n, rng)
    lay = layer(rng, k, f_in, f_out)
    x = rng.normal(size=(n, f_in))
    y, _ = cheb_forward(lap, x, lay)
    ref = dense_oracle(lap.matrix.toarray(), x, lay.weights, lay.bias)
    scale = max(1.0, np.abs(ref).max())
    assert np.abs(y - ref).max() <= 1e-10 * scale


def test_batched_signal_equals_per_sample_calls():
    rng = np.random.default_rng(2)
    lap = cycle_laplacian(10)
    lay = layer(rng, 3, 2, 4)
    x = rng.normal(size=(10, 5, 2))
    y, _ = cheb_forward(lap, x, lay)
    for b in range(5):
        yb, _ = cheb_forward(lap, x[:, b], lay)
        np.testing.assert_allclose(y[:, b], yb, rtol=1e-13)


def test_order_two_filter_is_one_hop_local():
    g = build_stochastic_graph(5, 5, GraphParams(4, 0, 1.0))
    lap = scale_laplacian(normalized_laplacian(g), 2.0)
    lay = ChebLayer(np.ones((2, 1, 1)), np.zeros(1), use_bias=False)
    v = 12
    x = np.zeros((25, 1))
    x[v] = 1.0
    y, _ = cheb_forward(lap, x, lay)
    support = set(np.flatnonzero(np.abs(y[:, 0]) > 1e-15))
    hood = {v} | set(g.adjacency[v].indices)
    assert support <= hood


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_forward_is_affine_in_the_signal(a, b, seed):
    rng = np.random.default_rng(seed)
    lap = random_laplacian(7, rng)
    lay = layer(rng, 3, 2, 2)
    x1, x2 = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
    f = lambda x: cheb_forward(lap, x, lay)[0]
    lhs = f(a * x1 + b * x2)
    rhs = a * f(x1) + b * f(x2) - (a + b - 1) * lay.bias
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_no_bias_ignores_bias_vector():
    rng = np.random.default_rng(3)
    lay = layer(rng, 2, 1, 2, use_bias=False)
    y, _ = cheb_forward(cycle_laplacian(4), np.zeros((4, 1)), lay)
    np.testing.assert_array_equal(y, 0.0)


def test_shape_errors():
    rng = np.random.default_rng(4)
    lay = layer(rng, 2, 2, 2)
    with pytest.raises(InvalidInputError):
        cheb_forward(cycle_laplacian(4), np.zeros((5, 2)), lay)
    with pytest.raises(InvalidInputError):
        cheb_forward(cycle_laplacian(4), np.zeros((4, 3)), lay)
    with pytest.raises(InvalidInputError):
        cheb_forward(cycle_laplacian(4), np.zeros(4), lay)
    with pytest.raises(InvalidInputError):
        ChebLayer(np.zeros((2, 1, 3)), np.zeros(2))


def test_glorot_init_bounds_and_zero_bias():
    lay = ChebLayer.init(3, 4, 5, np.random.default_rng(0))
    lim = glorot_limit(12, 5)
    assert lim == pytest.approx(np.sqrt(6 / 17))
    assert np.abs(lay.weights).max() <= lim
    np.testing.assert_array_equal(lay.bias, 0.0)
    with pytest.raises(InvalidConfigError):
        ChebLayer.init(0, 1, 1, np.random.default_rng(0))


def test_basis_first_terms():
    lap = cycle_laplacian(6)
    x = np.arange(6.0).reshape(6, 1)
    z = chebyshev_basis(lap, x, 3)
    m = lap.matrix.toarray()
    np.testing.assert_allclose(z[0], x)
    np.testing.assert_allclose(z[1], m @ x)
    np.testing.assert_allclose(z[2], 2 * m @ m @ x - x)


# ---------------------------------------------------------------- backward

def numeric_grad(f, arr, eps=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(1e-8, np.abs(b).max())


def test_order_one_gradients_are_linear_layer_gradients():
    rng = np.random.default_rng(5)
    lay = layer(rng, 1, 3, 2)
    x = rng.normal(size=(6, 3))
    g = rng.normal(size=(6, 2))
    _, cache = cheb_forward(cycle_laplacian(6), x, lay)
    gx, gw, gb = cheb_backward(cache, g)
    np.testing.assert_allclose(gw[0], x.T @ g, rtol=1e-13)
    np.testing.assert_allclose(gx, g @ lay.weights[0].T, rtol=1e-13)
    np.testing.assert_allclose(gb, g.sum(axis=0), rtol=1e-13)


@pytest.mark.parametrize("batched", [False, True])
def test_order_three_gradients_match_finite_differences(batched):
    rng = np.random.default_rng(6)
    lap = random_laplacian(6, rng)
    lay = layer(rng, 3, 2, 3)
    x = rng.normal(size=(6, 4, 2) if batched else (6, 2))
    proj = rng.normal(size=x.shape[:-1] + (3,))
    loss = lambda: float(np.sum(cheb_forward(lap, x, lay)[0] * proj))
    _, cache = cheb_forward(lap, x, lay)
    gx, gw, gb = cheb_backward(cache, proj)
    assert rel_err(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_err(gw, numeric_grad(loss, lay.weights)) < 1e-4
    assert rel_err(gb, numeric_grad(loss, lay.bias)) < 1e-4


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 9), k=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_input_gradient_matches_finite_differences(n, k, seed):
    rng = np.random.default_rng(seed)
    lap = random_laplacian(n, rng)
    lay = layer(rng, k, 2, 2)
    x = rng.normal(size=(n, 2))
    proj = rng.normal(size=(n, 2))
    loss = lambda: float(np.sum(cheb_forward(lap, x, lay)[0] * proj))
    _, cache = cheb_forward(lap, x, lay)
    gx, gw, _ = cheb_backward(cache, proj)
    assert rel_err(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_err(gw, numeric_grad(loss, lay.weights)) < 1e-4


def test_stale_cache_is_rejected():
    rng = np.random.default_rng(7)
    lay = layer(rng, 2, 1, 1)
    _, cache = cheb_forward(cycle_laplacian(4), rng.normal(size=(4, 1)), lay)
    with pytest.raises(ContractViolationError):
        cheb_backward(cache, np.zeros((5, 1)))
    lay.weights += 1.0
    with pytest.raises(ContractViolationError):
        cheb_backward(cache, np.zeros((4, 1)))


# ---------------------------------------------------------------- relu and pooling

def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(x), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(x, np.ones(3)), [0, 0, 1])


def test_relu_gradient_away_from_zero():
    rng = np.random.default_rng(8)
    x = rng.normal(size=20)
    x[np.abs(x) < 1e-3] = 0.5
    num = numeric_grad(lambda: float(relu(x).sum()), x)
    np.testing.assert_allclose(relu_backward(x, np.ones(20)), num, atol=1e-8)


def test_pool_stride_one_is_identity():
    x = np.arange(6.0).reshape(3, 2)
    pooled, arg = graph_max_pool(x, 1)
    np.testing.assert_array_equal(pooled, x)
    np.testing.assert_array_equal(arg[:, 0], [0, 1, 2])


def test_pool_example():
    pooled, arg = graph_max_pool(np.array([[5.0], [1.0], [3.0], [9.0]]), 2)
    np.testing.assert_array_equal(pooled[:, 0], [5, 9])
    np.testing.assert_array_equal(arg[:, 0], [0, 3])


def test_pool_ties_go_to_lowest_child():
    _, arg = graph_max_pool(np.array([[2.0], [2.0], [1.0], [1.0]]), 4)
    assert arg[0, 0] == 0


def test_pool_padding_never_wins():
    x = np.array([[1.0], [100.0], [-5.0], [-7.0]])
    mask = np.array([True, False, False, False])
    pooled, arg = graph_max_pool(x, 2, real_mask=mask)
    np.testing.assert_array_equal(pooled[:, 0], [1.0, 0.0])
    np.testing.assert_array_equal(arg[:, 0], [0, -1])
    back = graph_max_pool_backward(np.ones((2, 1)), arg, 4)
    np.testing.assert_array_equal(back[:, 0], [1, 0, 0, 0])


def test_pool_errors():
    with pytest.raises(InvalidConfigError):
        graph_max_pool(np.zeros((6, 1)), 3)
    with pytest.raises(InvalidInputError):
        graph_max_pool(np.zeros((6, 1)), 4)


def test_pool_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = rng.permutation(64).astype(float).reshape(16, 2, 2)  # distinct values, no ties
    proj = rng.normal(size=(4, 2, 2))
    loss = lambda: float(np.sum(graph_max_pool(x, 4)[0] * proj))
    _, arg = graph_max_pool(x, 4)
    back = graph_max_pool_backward(proj, arg, 16)
    np.testing.assert_allclose(back, numeric_grad(loss, x), atol=1e-8)
