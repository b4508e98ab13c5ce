import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spacemoe import tensor as T
from spacemoe.gradcheck import check


def t64(a, grad=True):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def fd_grad(f, x, h=1e-6):
    """Central differences of scalar f(ndarray) at x."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_row_col():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    W = rng.normal(size=(3, 2))
    a, b = t64(A), t64(B)
    T.backward(T.tsum(T.mul(T.matmul(a, b), W)))
    ga = fd_grad(lambda x: float(np.sum((x @ B) * W)), A)
    gb = fd_grad(lambda x: float(np.sum((A @ x) * W)), B)
    assert np.max(np.abs(a.grad - ga) / np.maximum(1e-12, np.abs(ga))) <= 1e-6
    assert np.max(np.abs(b.grad - gb) / np.maximum(1e-12, np.abs(gb))) <= 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_matmul_dtype_mismatch():
    with pytest.raises(TypeError):
        T.matmul(T.Tensor(np.zeros((2, 2), np.float32)), T.Tensor(np.zeros((2, 2))))


# ---------------------------------------------------------------- conv1d

def test_conv1d_identity_kernel():
    x = T.Tensor(np.ones((1, 1, 4)))
    w = T.Tensor(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(T.conv1d(x, w).data.ravel(), [1, 1, 1, 1])


def test_conv1d_pairwise_sums_stride2():
    x = T.Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    w = T.Tensor(np.ones((1, 1, 2)))
    np.testing.assert_array_equal(T.conv1d(x, w, stride=2).data.ravel(), [3, 7])


@pytest.mark.parametrize("L,k,stride,pad", [(9, 3, 1, 1), (10, 4, 2, 0), (7, 5, 3, 2), (5, 5, 1, 0)])
def test_conv1d_output_length(L, k, stride, pad):
    out = T.conv1d(T.Tensor(np.zeros((1, 2, L))), T.Tensor(np.zeros((3, 2, k))), stride=stride, pad=pad)
    assert out.shape == (1, 3, (L + 2 * pad - k) // stride + 1)


def test_conv1d_kernel_wider_than_input():
    with pytest.raises(T.ShapeError):
        T.conv1d(T.Tensor(np.zeros((1, 1, 3))), T.Tensor(np.zeros((1, 1, 5))))


def test_conv1d_matches_direct_loop_and_fd():
    rng = np.random.default_rng(5)
    X, Wk, bias = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)

    def direct(Xv, Wv):
        Xp = np.pad(Xv, ((0, 0), (0, 0), (1, 1)))
        out = np.zeros((2, 4, 8))
        for b in range(2):
            for o in range(4):
                for i in range(8):
                    out[b, o, i] = np.sum(Xp[b, :, i:i + 3] * Wv[o]) + bias[o]
        return out

    x, w = t64(X), t64(Wk)
    y = T.conv1d(x, w, T.Tensor(bias), pad=1)
    np.testing.assert_allclose(y.data, direct(X, Wk), atol=1e-12)
    G = rng.normal(size=y.shape)
    T.backward(T.tsum(T.mul(y, G)))
    gx = fd_grad(lambda v: float(np.sum(direct(v, Wk) * G)), X)
    gw = fd_grad(lambda v: float(np.sum(direct(X, v) * G)), Wk)
    assert np.max(np.abs(x.grad - gx) / np.maximum(1e-12, np.abs(gx))) <= 1e-6
    assert np.max(np.abs(w.grad - gw) / np.maximum(1e-12, np.abs(gw))) <= 1e-6


# ---------------------------------------------------------------- softmax / topk

def test_softmax_values():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(T.Tensor([math.log(1), math.log(2), math.log(3)])).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_no_overflow():
    out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    a = T.softmax(T.Tensor(x)).data
    b = T.softmax(T.Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_topk_softmax_example():
    out = T.topk_softmax(T.Tensor([1.0, 2.0, 3.0, 4.0]), 3).data
    np.testing.assert_allclose(out, [0.0, 0.0900, 0.2447, 0.6652], atol=1e-4)
    assert out[0] == 0.0


def test_topk_softmax_full_selection_is_softmax():
    x = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_allclose(T.topk_softmax(T.Tensor(x), 6).data, T.softmax(T.Tensor(x)).data, atol=1e-12)


def test_topk_softmax_argmax():
    np.testing.assert_array_equal(T.topk_softmax(T.Tensor([5.0, 1.0, 1.0]), 1).data, [1, 0, 0])


def test_topk_ties_lowest_index_wins():
    out = T.topk_softmax(T.Tensor([1.0, 1.0, 1.0, 0.0]), 2).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0, 0.0])


@pytest.mark.parametrize("k", [0, 5])
def test_topk_out_of_range(k):
    with pytest.raises(ValueError):
        T.topk_softmax(T.Tensor(np.zeros(4)), k)


def test_topk_gradient_zero_on_unselected():
    x = t64([0.3, -1.0, 2.0, 0.9])
    T.backward(T.tsum(T.mul(T.topk_softmax(x, 2), np.array([1.0, 2.0, 3.0, 4.0]))))
    assert x.grad[0] == 0.0 and x.grad[1] == 0.0
    assert np.all(x.grad[2:] != 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-20, 20)), st.data())
def test_topk_exactly_k_nonzero(x, data):
    k = data.draw(st.integers(1, x.size))
    out = T.topk_softmax(T.Tensor(x), k).data
    assert np.count_nonzero(out) == k
    assert abs(out.sum() - 1.0) <= 1e-12


# ---------------------------------------------------------------- elementwise

def test_log_and_softplus_values():
    assert T.log(T.Tensor([1.0])).data[0] == 0.0
    assert abs(T.softplus(T.Tensor([0.0])).data[0] - math.log(2)) < 1e-15


def test_log_domain_error():
    with pytest.raises(T.DomainError):
        T.log(T.Tensor([1.0, 0.0]))


def test_div_by_zero():
    with pytest.raises(ZeroDivisionError):
        T.div(T.Tensor([1.0]), T.Tensor([0.0]))


def test_gelu_gradient_fd():
    x = t64(np.linspace(-4, 4, 17))
    err, _ = check(lambda: T.tsum(T.gelu(x)), [x], h=1e-5)
    assert err <= 1e-5


def test_broadcast_add_grad_reduces():
    a, b = t64(np.ones((3, 4))), t64(np.ones(4))
    T.backward(T.tsum(T.add(a, b)))
    np.testing.assert_array_equal(b.grad, [3, 3, 3, 3])


# ---------------------------------------------------------------- layernorm / pooling

def test_layernorm_constant_vector_to_zero():
    out = T.layernorm(T.Tensor(np.full((2, 6), 3.0)), T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layernorm_moments():
    x = np.random.default_rng(1).normal(3, 5, size=(10, 32))
    out = T.layernorm(T.Tensor(x), T.Tensor(np.ones(32)), T.Tensor(np.zeros(32))).data
    assert np.max(np.abs(out.mean(axis=-1))) <= 1e-6
    assert np.max(np.abs(out.var(axis=-1) - 1)) <= 1e-4


def test_layernorm_gradcheck():
    rng = np.random.default_rng(2)
    x, g, b = t64(rng.normal(size=(3, 7))), t64(rng.normal(size=7)), t64(rng.normal(size=7))
    W = rng.normal(size=(3, 7))
    err, _ = check(lambda: T.tsum(T.mul(T.layernorm(x, g, b), W)), [x, g, b])
    assert err <= 1e-5


def test_mean_pool():
    np.testing.assert_array_equal(T.mean_pool(T.Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data, [3, 5])
    x = np.random.default_rng(0).normal(size=(1, 5))
    np.testing.assert_array_equal(T.mean_pool(T.Tensor(x), 0).data, x[0])


def test_mean_pool_gradient_is_one_over_L():
    x = t64(np.random.default_rng(0).normal(size=(4, 6)))
    T.backward(T.tsum(T.mean_pool(x, 0)))
    np.testing.assert_allclose(x.grad, 0.25)


def test_maxpool_forward_and_grad():
    x = t64([[[1.0, 3.0, 2.0, 2.0]]])
    y = T.maxpool1d(x, 2)
    np.testing.assert_array_equal(y.data, [[[3.0, 2.0]]])
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, [[[0.0, 1.0, 1.0, 0.0]]])


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    X = np.random.default_rng(0).normal(size=5)
    x = t64(X)
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * X)


def test_backward_non_scalar():
    with pytest.raises(T.ShapeError):
        T.backward(t64(np.ones(3)) * 2.0)


def test_backward_accumulates_across_losses():
    X = np.random.default_rng(0).normal(size=4)
    x = t64(X)
    T.backward(T.tsum(T.mul(x, 3.0)))
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 3.0 + 2 * X)


def test_backward_shared_subexpression_visited_once():
    x = t64([2.0])
    y = T.mul(x, x)
    z = T.add(y, y)  # dz/dx = 4x
    T.backward(T.tsum(z))
    np.testing.assert_allclose(x.grad, [8.0])


def test_topological_order_parents_first():
    a = t64([1.0])
    b = T.exp(a)
    c = T.mul(b, a)
    d = T.add(c, b)
    order = T.topological_order(d)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_graph_without_requires_grad():
    y = T.exp(T.Tensor([1.0]))
    assert not y.requires_grad and y._parents == ()


def test_f32_stays_f32():
    x = T.Tensor(np.ones(3, np.float32), requires_grad=True)
    y = T.gelu(T.mul(x, 2.0))
    assert y.dtype == np.float32
