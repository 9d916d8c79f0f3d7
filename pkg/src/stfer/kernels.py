"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. The numba path is
used unless ``STFER_DISABLE_NUMBA=1`` is set in the environment (or numba is
not importable). Both paths are exposed as ``<name>_numpy`` / ``<name>_numba``
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
import os

import numpy as np

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("STFER_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _jit(fn):
    if not HAVE_NUMBA:
        return fn
    return njit(cache=True, fastmath=False)(fn)


# --------------------------------------------------------------------------- #
# Row softmax: x is (R, K); -inf entries receive exactly zero weight.
# --------------------------------------------------------------------------- #
def softmax_rows_numpy(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_loop(x):
    R, K = x.shape
    out = np.empty_like(x)
    for r in range(R):
        m = -np.inf
        for k in range(K):
            if x[r, k] > m:
                m = x[r, k]
        s = 0.0
        for k in range(K):
            e = np.exp(x[r, k] - m)
            out[r, k] = e
            s += e
        for k in range(K):
            out[r, k] /= s
    return out


def softmax_rows_backward_numpy(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def _softmax_rows_backward_loop(y, dy):
    R, K = y.shape
    out = np.empty_like(y)
    for r in range(R):
        s = 0.0
        for k in range(K):
            s += dy[r, k] * y[r, k]
        for k in range(K):
            out[r, k] = y[r, k] * (dy[r, k] - s)
    return out


# --------------------------------------------------------------------------- #
# Layer norm over the last axis of a (R, D) array.
# --------------------------------------------------------------------------- #
def layer_norm_rows_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layer_norm_rows_loop(x, gamma, beta, eps):
    R, D = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(R)
    for r in range(R):
        mu = 0.0
        for d in range(D):
            mu += x[r, d]
        mu /= D
        var = 0.0
        for d in range(D):
            c = x[r, d] - mu
            var += c * c
        var /= D
        rs = 1.0 / np.sqrt(var + eps)
        rstd[r] = rs
        for d in range(D):
            h = (x[r, d] - mu) * rs
            xhat[r, d] = h
            y[r, d] = h * gamma[d] + beta[d]
    return y, xhat, rstd


def layer_norm_rows_backward_numpy(dy, xhat, rstd, gamma):
    D = xhat.shape[1]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = (rstd[:, None] / D) * (D * g - g.sum(axis=1, keepdims=True)
                                - xhat * (g * xhat).sum(axis=1, keepdims=True))
    return dx, dgamma, dbeta


def _layer_norm_rows_backward_loop(dy, xhat, rstd, gamma):
    R, D = xhat.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(D)
    dbeta = np.zeros(D)
    for r in range(R):
        s1 = 0.0
        s2 = 0.0
        for d in range(D):
            g = dy[r, d] * gamma[d]
            s1 += g
            s2 += g * xhat[r, d]
            dgamma[d] += dy[r, d] * xhat[r, d]
            dbeta[d] += dy[r, d]
        for d in range(D):
            g = dy[r, d] * gamma[d]
            dx[r, d] = rstd[r] / D * (D * g - s1 - xhat[r, d] * s2)
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------- #
# Retrieval ranking: per query, first-hit rank and average precision.
# dist (Q, G) with +inf marking excluded gallery entries; matches (Q, G) bool.
# Returns first_hit (Q,) int64, -1 when the query has no valid positive, and
# ap (Q,) float64 (nan for skipped queries).
# --------------------------------------------------------------------------- #
def rank_queries_numpy(dist, matches):
    Q = dist.shape[0]
    first_hit = np.full(Q, -1, dtype=np.int64)
    ap = np.full(Q, np.nan)
    for q in range(Q):
        valid = np.isfinite(dist[q])
        order = np.argsort(dist[q][valid], kind="stable")
        hits = matches[q][valid][order]
        if not hits.any():
            continue
        pos = np.flatnonzero(hits)
        first_hit[q] = pos[0]
        ap[q] = np.mean(np.arange(1, pos.size + 1) / (pos + 1.0))
    return first_hit, ap


def _rank_queries_loop(dist, matches):
    Q, G = dist.shape
    first_hit = np.full(Q, -1, dtype=np.int64)
    ap = np.full(Q, np.nan)
    for q in range(Q):
        n = 0
        for g in range(G):
            if np.isfinite(dist[q, g]):
                n += 1
        idx = np.empty(n, dtype=np.int64)
        vals = np.empty(n)
        n = 0
        for g in range(G):
            if np.isfinite(dist[q, g]):
                idx[n] = g
                vals[n] = dist[q, g]
                n += 1
        order = np.argsort(vals, kind="mergesort")
        npos = 0
        acc = 0.0
        for r in range(n):
            if matches[q, idx[order[r]]]:
                npos += 1
                if npos == 1:
                    first_hit[q] = r
                acc += npos / (r + 1.0)
        if npos > 0:
            ap[q] = acc / npos
    return first_hit, ap


if HAVE_NUMBA:
    softmax_rows_numba = _jit(_softmax_rows_loop)
    softmax_rows_backward_numba = _jit(_softmax_rows_backward_loop)
    layer_norm_rows_numba = _jit(_layer_norm_rows_loop)
    layer_norm_rows_backward_numba = _jit(_layer_norm_rows_backward_loop)
    rank_queries_numba = _jit(_rank_queries_loop)
else:  # pragma: no cover
    softmax_rows_numba = softmax_rows_numpy
    softmax_rows_backward_numba = softmax_rows_backward_numpy
    layer_norm_rows_numba = layer_norm_rows_numpy
    layer_norm_rows_backward_numba = layer_norm_rows_backward_numpy
    rank_queries_numba = rank_queries_numpy

if USE_NUMBA:
    softmax_rows = softmax_rows_numba
    softmax_rows_backward = softmax_rows_backward_numba
    layer_norm_rows = layer_norm_rows_numba
    layer_norm_rows_backward = layer_norm_rows_backward_numba
    rank_queries = rank_queries_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_backward = softmax_rows_backward_numpy
    layer_norm_rows = layer_norm_rows_numpy
    layer_norm_rows_backward = layer_norm_rows_backward_numpy
    rank_queries = rank_queries_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"
