import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stfer import kernels
from stfer import numeric_core as nc


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- matmul
def test_matmul_identity_and_scalar():
    X = rng().normal(size=(3, 4))
    np.testing.assert_array_equal(nc.matmul(np.eye(3), X), X)
    assert nc.matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.DimensionError, match="4x5.*4x3"):
        nc.matmul(np.zeros((4, 5)), np.zeros((4, 3)))


def test_matmul_gradient_vs_finite_differences():
    r = rng(1)
    A, B = r.normal(size=(4, 5)), r.normal(size=(5, 3))
    W = r.normal(size=(4, 3))  # random cotangent makes the loss non-trivial
    da, db = nc.matmul_backward(W, A, B)
    assert nc.grad_check(lambda a: np.sum(W * (a @ B)), lambda a: da, A) < 1e-6
    assert nc.grad_check(lambda b: np.sum(W * (A @ b)), lambda b: db, B) < 1e-6


def test_matmul_associativity():
    r = rng(2)
    for _ in range(50):
        m, k, n, p = r.integers(1, 7, size=4)
        A, B, C = r.normal(size=(m, k)), r.normal(size=(k, n)), r.normal(size=(n, p))
        left, right = nc.matmul(nc.matmul(A, B), C), nc.matmul(A, nc.matmul(B, C))
        assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


# ---------------------------------------------------------------- softmax
def test_softmax_closed_forms():
    np.testing.assert_allclose(nc.softmax(np.zeros(3)), [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(nc.softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_match_extended_precision():
    y = nc.softmax(np.array([1000.0, 0.0]))
    mpmath.mp.dps = 50
    e = mpmath.exp(-1000)
    oracle = [float(1 / (1 + e)), float(e / (1 + e))]
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, oracle, rtol=1e-15, atol=1e-300)


def test_softmax_nan_rejected():
    with pytest.raises(nc.NumericError):
        nc.softmax(np.array([0.0, np.nan]))


def test_softmax_mask_gives_exact_zero():
    y = nc.softmax(np.array([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]]))
    assert y[0, 1] == 0.0
    assert abs(y.sum() - 1) < 1e-15


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
              elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(x, c):
    y = nc.softmax(x, axis=1)
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(axis=1) - 1)) <= 1e-12
    assert np.max(np.abs(nc.softmax(x + c, axis=1) - y)) <= 1e-9


def test_softmax_gradient():
    r = rng(3)
    for axis in (0, 1):
        x = r.normal(size=(3, 4))
        w = r.normal(size=(3, 4))
        f = lambda z: np.sum(w * nc.softmax(z, axis=axis))
        g = lambda z: nc.softmax_backward(w, nc.softmax(z, axis=axis), axis=axis)
        assert nc.grad_check(f, g, x) < 1e-6


# ---------------------------------------------------------------- tanh_affine
def test_tanh_affine_zero_and_scalar():
    s = rng().normal(size=(4, 3))
    np.testing.assert_array_equal(nc.tanh_affine(s, np.zeros((3, 5)), np.zeros(5)), np.zeros((4, 5)))
    mpmath.mp.dps = 30
    assert abs(nc.tanh_affine(0.5, 1.0, 0.0)[0] - float(mpmath.tanh(0.5))) < 1e-15
    assert abs(float(mpmath.tanh(0.5)) - 0.46212) < 5e-6


def test_tanh_affine_shape_error():
    with pytest.raises(nc.DimensionError):
        nc.tanh_affine(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


def test_tanh_affine_gradient_random_points():
    r = rng(4)
    worst = 0.0
    for _ in range(100):
        s, W, b = r.normal(size=(2, 3)), r.normal(size=(3, 4)), r.normal(size=4)
        w = r.normal(size=(2, 4))
        y = nc.tanh_affine(s, W, b)
        ds, dW, db = nc.tanh_affine_backward(w, s, W, y)
        worst = max(worst,
                    nc.grad_check(lambda z: np.sum(w * nc.tanh_affine(z, W, b)), lambda z: ds, s),
                    nc.grad_check(lambda z: np.sum(w * nc.tanh_affine(s, z, b)), lambda z: dW, W),
                    nc.grad_check(lambda z: np.sum(w * nc.tanh_affine(s, W, z)), lambda z: db, b))
    assert worst < 1e-6


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3.5, 3.5)),
       arrays(np.float64, (2, 2), elements=st.floats(-2, 2)))
def test_tanh_affine_strictly_inside_unit_interval(s, W):
    # |pre-activation| <= 14 here; beyond ~14.1 float64 tanh rounds to exactly +-1
    y = nc.tanh_affine(s, W, np.zeros(2))
    assert np.all(np.abs(y) <= 1 - 1e-12)


# ---------------------------------------------------------------- cross entropy
def test_cross_entropy_closed_forms():
    assert abs(nc.cross_entropy(np.zeros(4), 2) - math.log(4)) < 1e-15
    assert nc.cross_entropy(np.array([50.0, 0, 0]), 0) < 1e-20


def test_cross_entropy_matches_direct_formula():
    r = rng(5)
    for _ in range(100):
        C = int(r.integers(2, 10))
        o = r.normal(scale=3, size=C)
        gt = int(r.integers(C))
        neg = sum(math.exp(o[j]) for j in range(C) if j != gt)
        direct = -math.log(math.exp(o[gt]) / (math.exp(o[gt]) + neg))
        assert abs(nc.cross_entropy(o, gt) - direct) < 1e-12


def test_cross_entropy_index_error():
    with pytest.raises(IndexError):
        nc.cross_entropy(np.zeros(3), 3)


def test_softmax_cross_entropy_composite_gradient():
    r = rng(6)
    for _ in range(100):
        x = r.normal(size=5)
        W = r.normal(size=(5, 4))
        f = lambda z: nc.cross_entropy(z @ W, 1)
        g = lambda z: W @ nc.cross_entropy_backward(z @ W, 1)
        assert nc.grad_check(f, g, x) < 1e-6


# ---------------------------------------------------------------- misc ops
def test_layer_norm_gradient():
    r = rng(7)
    for _ in range(20):
        x = r.normal(size=(3, 6))
        gamma, beta = r.normal(size=6), r.normal(size=6)
        w = r.normal(size=(3, 6))
        y, cache = nc.layer_norm(x, gamma, beta)
        dx, dg, db = nc.layer_norm_backward(w, cache)
        assert nc.grad_check(lambda z: np.sum(w * nc.layer_norm(z, gamma, beta)[0]), lambda z: dx, x) < 1e-6
        assert nc.grad_check(lambda z: np.sum(w * nc.layer_norm(x, z, beta)[0]), lambda z: dg, gamma) < 1e-6
        assert nc.grad_check(lambda z: np.sum(w * nc.layer_norm(x, gamma, z)[0]), lambda z: db, beta) < 1e-6


def test_gelu_and_mean_pool_gradients():
    r = rng(8)
    x = r.normal(size=(2, 5, 3))
    w = r.normal(size=(2, 5, 3))
    assert nc.grad_check(lambda z: np.sum(w * nc.gelu(z)), lambda z: nc.gelu_backward(w, z), x) < 1e-4
    mask = np.array([[True, True, False, True, False], [False] * 5])
    wp = r.normal(size=(2, 3))
    pooled = nc.mean_pool(x, 1, mask)
    np.testing.assert_array_equal(pooled[1], 0.0)
    np.testing.assert_allclose(pooled[0], x[0, [0, 1, 3]].mean(axis=0), atol=1e-15)
    assert nc.grad_check(lambda z: np.sum(wp * nc.mean_pool(z, 1, mask)),
                         lambda z: nc.mean_pool_backward(wp, z, 1, mask), x) < 1e-6


def test_grad_check_linear_is_exact_to_roundoff():
    a = rng(9).normal(size=7)
    assert nc.grad_check(lambda z: float(a @ z), lambda z: a, np.ones(7)) < 1e-9


def test_grad_check_rejects_nonfinite():
    with pytest.raises(nc.NumericError):
        nc.grad_check(lambda z: float("nan"), lambda z: z, np.ones(2))


def test_concat_seq_checks_feature_dim():
    with pytest.raises(nc.DimensionError):
        nc.concat_seq([np.zeros((1, 2, 3)), np.zeros((1, 2, 4))])


# ---------------------------------------------------------------- rng streams
def test_rng_streams_replay_and_isolation():
    a, b = nc.RngStream(7, "masking"), nc.RngStream(7, "masking")
    np.testing.assert_array_equal(a.gen.random(10), b.gen.random(10))
    s = nc.RngStream(7, "sampling")
    assert not np.array_equal(nc.RngStream(7, "masking").gen.random(4), s.gen.random(4))
    words = a.state_words()
    x = a.gen.random(5)
    c = nc.RngStream(0, "masking")
    c.load_state_words(words)
    np.testing.assert_array_equal(c.gen.random(5), x)
    with pytest.raises(ValueError):
        nc.RngStream(0, "bogus")


# ---------------------------------------------------------------- numba vs numpy paths
@pytest.mark.parametrize("shape", [(1, 1), (7, 5), (33, 26)])
def test_kernel_backends_agree(shape):
    r = rng(10)
    x = r.normal(size=shape) * 5
    x[0, 0] = -np.inf if shape[1] > 1 else x[0, 0]
    np.testing.assert_allclose(kernels.softmax_rows_numba(x), kernels.softmax_rows_numpy(x), atol=1e-15)
    y = kernels.softmax_rows_numpy(x)
    dy = r.normal(size=shape)
    np.testing.assert_allclose(kernels.softmax_rows_backward_numba(y, dy),
                               kernels.softmax_rows_backward_numpy(y, dy), atol=1e-13)
    x = r.normal(size=shape)
    g, bt = r.normal(size=shape[1]), r.normal(size=shape[1])
    for u, v in zip(kernels.layer_norm_rows_numba(x, g, bt, 1e-6), kernels.layer_norm_rows_numpy(x, g, bt, 1e-6)):
        np.testing.assert_allclose(u, v, atol=1e-12)
    _, xh, rs = kernels.layer_norm_rows_numpy(x, g, bt, 1e-6)
    for u, v in zip(kernels.layer_norm_rows_backward_numba(dy, xh, rs, g),
                    kernels.layer_norm_rows_backward_numpy(dy, xh, rs, g)):
        np.testing.assert_allclose(u, v, atol=1e-10)


def test_rank_kernel_backends_agree():
    r = rng(11)
    for _ in range(50):
        d = np.round(r.random((6, 15)), 1)  # ties exercise the stable order
        d[r.random(d.shape) < 0.2] = np.inf
        m = r.random(d.shape) < 0.3
        f1, a1 = kernels.rank_queries_numba(d, m)
        f2, a2 = kernels.rank_queries_numpy(d, m)
        np.testing.assert_array_equal(f1, f2)
        np.testing.assert_allclose(a1, a2, atol=1e-12, equal_nan=True)
