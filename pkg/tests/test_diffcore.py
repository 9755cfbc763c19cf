import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from infogeo.diffcore import (Tensor, grad_check, jacobi_eigh, no_grad, ops as T, softmax_axis,
                              stop_gradient, svd_small, sym_eig)
from infogeo.errors import GraphError, NumericError, ShapeError
from infogeo.gradsuite import elementwise_suite


def finite(lo=-5.0, hi=5.0):
    return st.floats(lo, hi, allow_nan=False, allow_infinity=False)


def rand_sym(rng, k):
    a = rng.normal(size=(k, k))
    return (a + a.T) / 2


# -- softmax ------------------------------------------------------------------
def test_softmax_uniform_pair():
    np.testing.assert_allclose(softmax_axis(Tensor([1.0, 1.0]), 0).data, [0.5, 0.5])


def test_softmax_log3_ratio():
    np.testing.assert_allclose(softmax_axis(Tensor([0.0, np.log(3.0)]), 0).data, [0.25, 0.75],
                               atol=1e-15)


def test_softmax_shift_invariance():
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax_axis(Tensor(x), 0).data,
                               softmax_axis(Tensor(x + 17.5), 0).data, atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        softmax_axis(Tensor(np.zeros((2, 3))), 2)


@given(arrays(np.float64, (3, 4), elements=finite(-1e3, 1e3)), st.integers(0, 1))
def test_softmax_rows_sum_to_one(x, axis):
    out = softmax_axis(Tensor(x), axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-9)


# -- primitives -----------------------------------------------------------------
def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_layernorm_constant_vector_is_zero():
    out = T.layer_norm(Tensor(np.full(7, 3.25)))
    np.testing.assert_array_equal(out.data, np.zeros(7))


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_array_equal((Tensor(a) @ Tensor(np.eye(4))).data, a)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_concat_and_reductions():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.zeros((1, 2)))
    c = T.concat([a, b], axis=0)
    assert c.shape == (3, 2)
    assert T.tsum(c).item() == 4.0
    np.testing.assert_allclose(T.var(Tensor([1.0, 3.0])).data, 1.0)
    np.testing.assert_allclose(T.l2_norm(Tensor([3.0, 4.0])).data, 5.0)


def test_grad_sum_of_squares():
    x = Tensor(np.random.default_rng(1).normal(size=5))
    assert grad_check(lambda t: T.tsum(t * t), [x]) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_nonfinite():
    with pytest.raises(NumericError):
        grad_check(lambda t: T.tsum(T.log(t)), [Tensor([-1.0, 2.0])])


@pytest.mark.parametrize("fn", [
    lambda a, b: T.tsum(T.layer_norm(a) * b),
    lambda a, b: T.tsum(T.softmax(a, 0) * b),
    lambda a, b: T.tsum(T.normalize(a, -1) * b),
    lambda a, b: T.tsum(T.gelu(a @ T.transpose(b))),
    lambda a, b: T.tsum(T.var(a, axis=1) * T.mean(b, axis=1)),
    lambda a, b: T.tsum(T.log_softmax(a, 1) * b),
])
def test_structured_ops_backward(fn):
    rng = np.random.default_rng(2)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    assert grad_check(fn, [a, b], 1e-5) < 1e-7


def test_elementwise_randomized_trials():
    assert elementwise_suite(trials=1000, seed=3) < 1e-6


def test_double_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.tsum(x * x)
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_no_grad_and_stop_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    z = T.tsum(stop_gradient(x) * x)
    z.backward()
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


# -- eigen / svd ----------------------------------------------------------------
def test_eig_diagonal():
    w, v = sym_eig(Tensor(np.diag([1.0, 2.0])))
    np.testing.assert_allclose(w.data, [1.0, 2.0])
    np.testing.assert_allclose(v.data, np.eye(2), atol=1e-12)


def test_eig_two_by_two_laplacian():
    w, v = sym_eig(Tensor([[0.5, -0.5], [-0.5, 0.5]]))
    np.testing.assert_allclose(w.data, [0.0, 1.0], atol=1e-12)


def test_eig_backward_random_distinct():
    rng = np.random.default_rng(4)
    m0 = rand_sym(rng, 4)
    weights = rng.normal(size=(4, 4))

    def f(m):
        sym = (m + T.transpose(m)) * 0.5
        w, v = sym_eig(sym)
        return T.tsum(w * Tensor([0.3, -0.2, 0.5, 0.1])) + T.tsum(v * weights)

    assert grad_check(f, [Tensor(m0)], 1e-6) < 1e-5


def test_eig_non_square():
    with pytest.raises(ShapeError):
        sym_eig(Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_eig_invariants(seed, k):
    m = rand_sym(np.random.default_rng(seed), k)
    w, v = sym_eig(Tensor(m))
    w, v = w.data, v.data
    np.testing.assert_allclose(m @ v, v * w, atol=1e-8)
    np.testing.assert_allclose(v.T @ v, np.eye(k), atol=1e-8)
    assert np.all(np.diff(w) >= 0)
    # sign convention: largest-magnitude entry of each column is positive
    idx = np.argmax(np.abs(v), axis=0)
    assert np.all(v[idx, np.arange(k)] > 0)
    w2, v2 = jacobi_eigh(m)
    np.testing.assert_array_equal(v2, v)


def test_svd_identity_and_diag():
    u, s, vt = svd_small(Tensor(np.eye(3)))
    np.testing.assert_allclose(s.data, 1.0)
    np.testing.assert_allclose(u.data @ vt.data, np.eye(3), atol=1e-12)
    _, s, _ = svd_small(Tensor(np.diag([3.0, -2.0])))
    np.testing.assert_allclose(s.data, [3.0, 2.0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_svd_reconstruction(seed, r):
    m = np.random.default_rng(seed).normal(size=(r, r))
    u, s, vt = (t.data for t in svd_small(Tensor(m)))
    np.testing.assert_allclose(u @ np.diag(s) @ vt, m, atol=1e-8)
    np.testing.assert_allclose(u.T @ u, np.eye(r), atol=1e-8)
    np.testing.assert_allclose(vt @ vt.T, np.eye(r), atol=1e-8)
    assert np.all(s >= 0) and np.all(np.diff(s) <= 1e-15)


def test_svd_backward():
    rng = np.random.default_rng(5)
    m0 = rng.normal(size=(3, 3))
    wu, wv = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    def f(m):
        u, s, vt = svd_small(m)
        return T.tsum(s * Tensor([1.0, 0.5, -0.3])) + T.tsum((u @ vt) * wu) + T.tsum(vt * wv)

    assert grad_check(f, [Tensor(m0)], 1e-6) < 1e-4
