"""Differentiable float64 primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects (row-major, float64). Every forward
op has a matching ``*_backward`` that maps the upstream gradient to input
gradients; there is no graph engine, callers chain backward passes explicitly.
"""
import hashlib

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _shape(a):
    return "x".join(str(s) for s in np.shape(a)) or "scalar"


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------- #
# RNG streams
# --------------------------------------------------------------------------- #
PURPOSES = ("init", "sampling", "masking", "augment")


class RngStream:
    """Counter-based random stream (Philox) keyed by ``(seed, purpose)``.

    Streams with different purposes never share draws, so turning a feature
    off (say, text masking) leaves the other streams' sequences untouched.
    """

    def __init__(self, seed, purpose):
        if purpose not in PURPOSES:
            raise ValueError(f"unknown rng purpose {purpose!r}; expected one of {PURPOSES}")
        self.seed = int(seed)
        self.purpose = purpose
        digest = hashlib.sha256(f"{self.seed}:{purpose}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64).copy()
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    @property
    def counter(self):
        return int(self._bitgen.state["state"]["counter"][0])

    def get_state(self):
        return self._bitgen.state

    def set_state(self, state):
        self._bitgen.state = state

    def state_words(self):
        """Philox state flattened to uint32 words (exactly representable in f64)."""
        st = self._bitgen.state
        u64 = np.concatenate([
            st["state"]["counter"], st["state"]["key"], st["buffer"],
            np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"]], dtype=np.uint64),
        ]).astype(np.uint64)
        return np.stack([u64 & 0xFFFFFFFF, u64 >> 32], axis=1).reshape(-1).astype(np.float64)

    def load_state_words(self, words):
        w = np.asarray(words, dtype=np.float64).astype(np.uint64).reshape(-1, 2)
        u64 = w[:, 0] | (w[:, 1] << np.uint64(32))
        st = self._bitgen.state
        st["state"]["counter"] = u64[0:4].copy()
        st["state"]["key"] = u64[4:6].copy()
        st["buffer"] = u64[6:10].copy()
        st["buffer_pos"] = int(u64[10])
        st["has_uint32"] = int(u64[11])
        st["uinteger"] = int(u64[12])
        self._bitgen.state = st


# --------------------------------------------------------------------------- #
# matmul
# --------------------------------------------------------------------------- #
def matmul(a, b):
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    if np.ndim(a) < 1 or np.ndim(b) < 1 or np.shape(a)[-1] != np.shape(b)[-2 if np.ndim(b) > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions disagree ({_shape(a)} vs {_shape(b)})")
    return np.matmul(a, b)


def matmul_backward(dc, a, b):
    """Gradients of ``a @ b``; a weight ``b`` of rank 2 shared across a batch
    gets its gradient summed over the leading axes."""
    da = np.matmul(dc, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        db = a.reshape(-1, a.shape[-1]).T @ dc.reshape(-1, dc.shape[-1])
    else:
        db = np.matmul(np.swapaxes(a, -1, -2), dc)
    return da, db


def linear(x, W, b=None):
    y = matmul(x, W)
    return y if b is None else y + b


def linear_backward(dy, x, W, with_bias=True):
    dx, dW = matmul_backward(dy, x, W)
    if not with_bias:
        return dx, dW, None
    return dx, dW, dy.reshape(-1, dy.shape[-1]).sum(axis=0)


# --------------------------------------------------------------------------- #
# softmax
# --------------------------------------------------------------------------- #
def softmax(x, axis=-1, mask=None):
    """Stable softmax along ``axis``. Where ``mask`` is False the input is
    treated as -inf, giving exactly zero weight."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise NumericError("softmax: NaN input")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    xm = np.moveaxis(x, axis, -1)
    flat = np.ascontiguousarray(xm.reshape(-1, xm.shape[-1]))
    if flat.shape[0] and not np.all(np.isfinite(flat.max(axis=1))):
        raise NumericError("softmax: slice with no finite entry")
    y = kernels.softmax_rows(flat).reshape(xm.shape)
    return np.moveaxis(y, -1, axis)


def softmax_backward(dy, y, axis=-1):
    ym = np.moveaxis(y, axis, -1)
    dym = np.moveaxis(dy, axis, -1)
    shp = ym.shape
    dx = kernels.softmax_rows_backward(
        np.ascontiguousarray(ym.reshape(-1, shp[-1])),
        np.ascontiguousarray(dym.reshape(-1, shp[-1])),
    ).reshape(shp)
    return np.moveaxis(dx, -1, axis)


# --------------------------------------------------------------------------- #
# tanh(s W + b)
# --------------------------------------------------------------------------- #
def tanh_affine(s, W, b):
    """Elementwise tanh(s @ W + b). ``s`` is (..., k), ``W`` is (k, n); a
    scalar ``s`` or ``W`` is read as a 1-vector / 1x1 map."""
    s = np.asarray(s, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim < 2:
        W = W.reshape(1, -1)
    if s.ndim == 0:
        s = s.reshape(1)
    if s.shape[-1] != W.shape[0] or b.shape not in ((), (W.shape[1],)):
        raise DimensionError(f"tanh_affine: {_shape(s)} @ {_shape(W)} + {_shape(b)} does not conform")
    return np.tanh(s @ W + b)


def tanh_affine_backward(dy, s, W, y):
    """Returns (ds, dW, db) for ``y = tanh(s W + b)``; ``s`` has a trailing
    feature axis matching ``W.shape[0]``."""
    dz = dy * (1.0 - y * y)
    s2 = s.reshape(-1, W.shape[0])
    dz2 = dz.reshape(-1, W.shape[1])
    return (dz @ W.T).reshape(s.shape), s2.T @ dz2, dz2.sum(axis=0)


# --------------------------------------------------------------------------- #
# cross entropy
# --------------------------------------------------------------------------- #
def log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, gt):
    """-log softmax(logits)[gt]. ``logits`` is (C,) with an int ``gt`` or
    (B, C) with int array ``gt``; the batched form returns a (B,) array."""
    logits = np.asarray(logits, dtype=np.float64)
    gt_arr = np.asarray(gt)
    C = logits.shape[-1]
    if np.any(gt_arr < 0) or np.any(gt_arr >= C):
        raise IndexError(f"cross_entropy: class index {gt} outside [0, {C})")
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(gt)])
    return -np.take_along_axis(lsm, gt_arr[:, None], axis=1)[:, 0]


def cross_entropy_backward(logits, gt, dloss=1.0):
    p = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    if p.ndim == 1:
        p[int(gt)] -= 1.0
        return p * dloss
    p[np.arange(p.shape[0]), np.asarray(gt)] -= 1.0
    return p * np.asarray(dloss, dtype=np.float64).reshape(-1, 1)


# --------------------------------------------------------------------------- #
# layer norm, gelu, pooling
# --------------------------------------------------------------------------- #
LN_EPS = 1e-6


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalizes the last axis. Returns ``(y, cache)``."""
    shp = x.shape
    y, xhat, rstd = kernels.layer_norm_rows(
        np.ascontiguousarray(x.reshape(-1, shp[-1])), gamma, beta, eps)
    return y.reshape(shp), (xhat, rstd, gamma, shp)


def layer_norm_backward(dy, cache):
    xhat, rstd, gamma, shp = cache
    dx, dg, db = kernels.layer_norm_rows_backward(
        np.ascontiguousarray(dy.reshape(-1, shp[-1])), xhat, rstd, gamma)
    return dx.reshape(shp), dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximated GELU (smooth, so finite-difference checks stay tight)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_backward(dy, x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def mean_pool(x, axis, mask=None):
    """Mean over ``axis``, restricted to entries where ``mask`` is True.
    Slices with no selected entry pool to zero."""
    if mask is None:
        return x.mean(axis=axis)
    w = _pool_weights(x, axis, mask)
    return (x * w).sum(axis=axis)


def _pool_weights(x, axis, mask):
    m = np.asarray(mask, dtype=np.float64)
    cnt = m.sum(axis=-1, keepdims=True)
    w = np.divide(m, cnt, out=np.zeros_like(m), where=cnt > 0)
    # broadcast the (…, n) weights against x's pooled axis
    w = np.moveaxis(w, -1, axis if axis >= 0 else x.ndim + axis)
    return np.expand_dims(w, tuple(range(w.ndim, x.ndim)))


def mean_pool_backward(dy, x, axis, mask=None):
    ax = axis if axis >= 0 else x.ndim + axis
    if mask is None:
        return np.broadcast_to(np.expand_dims(dy, ax) / x.shape[ax], x.shape).copy()
    return np.expand_dims(dy, ax) * _pool_weights(x, axis, mask)


def transpose(x):
    return np.swapaxes(x, -1, -2)


def concat_seq(parts):
    """Concatenate (B, n_i, D) blocks along the sequence axis."""
    D = {p.shape[-1] for p in parts}
    if len(D) != 1:
        raise DimensionError(f"concat_seq: feature sizes differ {[_shape(p) for p in parts]}")
    return np.concatenate(parts, axis=-2)


# --------------------------------------------------------------------------- #
# finite-difference verification
# --------------------------------------------------------------------------- #
def numerical_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f`` at every coordinate of ``x`` (in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite output at coordinate {i}")
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """Max elementwise |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def grad_check(f, grad_f, x, h=1e-5, floor=1e-8):
    """Compare ``grad_f(x)`` against central differences of ``f`` at ``x``.

    ``f`` must be scalar-valued. Returns the max relative error.
    """
    x = np.array(x, dtype=np.float64)
    fx = f(x)
    if not np.isfinite(fx):
        raise NumericError("grad_check: non-finite function value")
    analytic = np.asarray(grad_f(x.copy()), dtype=np.float64)
    return relative_error(analytic, numerical_gradient(f, x, h), floor)


def directional_check(f, grad, x, direction, h=1e-5):
    """Relative error between <grad, u> and (f(x+hu) - f(x-hu)) / 2h."""
    fp, fm = f(x + h * direction), f(x - h * direction)
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericError("directional_check: non-finite output")
    num = (fp - fm) / (2 * h)
    ana = float(np.sum(grad * direction))
    return abs(ana - num) / max(abs(ana), abs(num), 1e-12)
