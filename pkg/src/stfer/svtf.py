"""Semantic-driven visual token filtering.

Text tokens query the patch tokens; the resulting text-to-patch attention map,
averaged over the real (non-pad) text rows, gives one relevance scalar per
patch. That scalar is expanded to D dims by an affine map and added to the
patch token through tanh, so each patch moves by strictly less than 1 per
coordinate.
"""
import math

import numpy as np

from . import numeric_core as nc


def init_filter(D, rng, std=0.02):
    from .backbone import trunc_normal
    return {
        "svtf.Wq": trunc_normal(rng, (D, D), std),
        "svtf.Wk": trunc_normal(rng, (D, D), std),
        "svtf.Wv": trunc_normal(rng, (1, D), std),
        "svtf.bv": np.zeros(D),
    }


def text_to_patch_attention(t, v, Wq, Wk):
    """A = softmax_N(Q K^T / sqrt(D)) with Q = t Wq, K = v Wk. Returns (A, Q, K)."""
    if t.shape[-1] != v.shape[-1] or Wq.shape != Wk.shape:
        raise nc.DimensionError(f"svtf attention: t {t.shape}, v {v.shape}, Wq {Wq.shape}, Wk {Wk.shape}")
    Q = t @ Wq
    K = v @ Wk
    A = nc.softmax(Q @ np.swapaxes(K, -1, -2) / math.sqrt(t.shape[-1]), axis=-1)
    return A, Q, K


def patch_relevance(A, text_mask):
    """Mean of A (B, L, N) over rows where ``text_mask`` (B, L) is True -> (B, N)."""
    return nc.mean_pool(A, -2, text_mask)


def filter_tokens(v, A, text_mask, Wv, bv):
    """v + tanh(s Wv + bv) per patch, where s is the per-patch relevance.
    Samples with no real text row pass through unchanged."""
    s = patch_relevance(A, text_mask)
    mod = nc.tanh_affine(s[..., None], Wv, bv)
    has_text = np.asarray(text_mask, dtype=bool).any(axis=-1)
    return v + mod * has_text[:, None, None], (s, mod, has_text)


class SVTF:
    """Encoder hook: replaces patch slots with filtered tokens computed from
    the current patch and text slots."""

    def __init__(self, params, cfg):
        self.p = params
        self.ps = cfg.patch_slice
        self.ts = cfg.text_slice

    def forward(self, z, key_mask):
        v, t = z[:, self.ps], z[:, self.ts]
        tmask = key_mask[:, self.ts]
        A, Q, K = text_to_patch_attention(t, v, self.p["svtf.Wq"], self.p["svtf.Wk"])
        vt, (s, mod, has_text) = filter_tokens(v, A, tmask, self.p["svtf.Wv"], self.p["svtf.bv"])
        out = z.copy()
        out[:, self.ps] = vt
        return out, (v, t, tmask, A, Q, K, s, mod, has_text)

    def backward(self, dz, cache, grads):
        v, t, tmask, A, Q, K, s, mod, has_text = cache
        p = self.p
        D = v.shape[-1]
        dvt = dz[:, self.ps]
        dmod = dvt * has_text[:, None, None]
        ds, dWv, dbv = nc.tanh_affine_backward(dmod, s[..., None], p["svtf.Wv"], mod)
        grads["svtf.Wv"] += dWv
        grads["svtf.bv"] += dbv
        dA = nc.mean_pool_backward(ds[..., 0], A, -2, tmask)
        dlog = nc.softmax_backward(dA, A, axis=-1) / math.sqrt(D)
        dQ = dlog @ K
        dK = np.swapaxes(dlog, -1, -2) @ Q
        dt, dWq = nc.matmul_backward(dQ, t, p["svtf.Wq"])
        dv_k, dWk = nc.matmul_backward(dK, v, p["svtf.Wk"])
        grads["svtf.Wq"] += dWq
        grads["svtf.Wk"] += dWk
        out = dz.copy()
        out[:, self.ps] = dvt + dv_k
        out[:, self.ts] = dz[:, self.ts] + dt
        return out
