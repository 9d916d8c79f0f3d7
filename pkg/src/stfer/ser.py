"""Semantic-driven expert routing.

Each scenario owns a gate that scores the shared expert bank from the
concatenation [scenario CLS feature, pooled text embedding]. The pooled text
is zeroed with probability ``p_m`` during training, and always at text-free
inference. The top-k experts are mixed with their gate scores renormalized
over the selection.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc
from .backbone import NUM_SCENARIOS, trunc_normal
from .synth_data import SCENARIOS

log = logging.getLogger(__name__)

MODES = ("train", "infer-textfree", "infer-text")


def init_ser(D, E, rng, hidden_ratio=4):
    hid = hidden_ratio * D
    return {
        "ser.gate": trunc_normal(rng, (NUM_SCENARIOS, 2 * D, E)),
        "ser.W1": trunc_normal(rng, (E, D, hid)),
        "ser.b1": np.zeros((E, hid)),
        "ser.W2": trunc_normal(rng, (E, hid, D)),
        "ser.b2": np.zeros((E, D)),
    }


def pool_text_global(t, text_mask):
    """Mean over real tokens; all-pad input pools to the zero vector.
    ``t`` is (L, D) or (B, L, D)."""
    return nc.mean_pool(t, -2, text_mask)


def draw_keep(n, p_m, rng):
    """One Bernoulli draw per sample: True keeps the text, False zeroes it
    (zeroed with probability p_m)."""
    return rng.random(n) >= p_m


def mask_text_global(t_g, p_m, rng, mode):
    """Apply the zero-mask to pooled text ``t_g`` ((D,) or (B, D))."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    t_g = np.asarray(t_g, dtype=np.float64)
    if mode == "infer-text":
        return t_g.copy()
    if mode == "infer-textfree":
        return np.zeros_like(t_g)
    keep = draw_keep(1 if t_g.ndim == 1 else t_g.shape[0], p_m, rng)
    return t_g * (keep[0] if t_g.ndim == 1 else keep[:, None])


@dataclass
class RoutingDecision:
    gates: np.ndarray      # (..., E), on the simplex
    selected: np.ndarray   # (..., k) expert indices, highest score first
    weights: np.ndarray    # (..., k) renormalized over the selection


def top_k(g, k):
    """Indices of the k largest entries along the last axis; ties go to the
    lower index."""
    order = np.argsort(-g, axis=-1, kind="stable")
    return order[..., :k]


def clamp_k(k, E):
    if k > E:
        log.warning("top_k=%d exceeds %d experts; using all experts", k, E)
        return E
    return k


def route_from_logits(logits, k):
    E = logits.shape[-1]
    k = clamp_k(k, E)
    g = nc.softmax(logits, axis=-1)
    sel = top_k(g, k)
    gs = np.take_along_axis(g, sel, axis=-1)
    return RoutingDecision(g, sel, gs / gs.sum(axis=-1, keepdims=True))


def route(cls_s, t_hat, gate, scenario, k):
    """Gate one scenario. ``gate`` is the (6, 2D, E) stack of scenario gates;
    ``scenario`` is a label like "DT-ST" or its index."""
    s = SCENARIOS.index(scenario) if isinstance(scenario, str) else int(scenario)
    if not 0 <= s < NUM_SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    x = np.concatenate([cls_s, t_hat], axis=-1)
    return route_from_logits(x @ gate[s], k)


def expert_forward(x, p, j):
    u = x @ p["ser.W1"][j] + p["ser.b1"][j]
    return nc.gelu(u) @ p["ser.W2"][j] + p["ser.b2"][j], u


def moe_forward(cls_s, decision, p):
    """sum_j weight_j * E_j(cls) over the selected experts (single sample, (D,))."""
    out = np.zeros_like(cls_s, dtype=np.float64)
    for j, w in zip(decision.selected, decision.weights):
        out = out + w * expert_forward(cls_s, p, int(j))[0]
    return out


def dense_weights(decision, E):
    """Scatter the selection weights into a dense (..., E) array."""
    W = np.zeros(decision.gates.shape[:-1] + (E,))
    np.put_along_axis(W, decision.selected, decision.weights, axis=-1)
    return W


class ExpertRouter:
    """Batched SER over all six scenario CLS outputs, with backward.

    ``use_ser=False`` replaces the mixture with expert 0 at weight 1. The
    router output is residual: O = cls + mixture(cls), like a transformer FFN.
    ``pinned=j`` keeps the gated path but forces the selection to expert j at
    weight 1 (used to check the ablation toggle against forced routing).
    """

    def __init__(self, params, cfg, use_ser=True, pinned=None):
        self.p = params
        self.cfg = cfg
        self.use_ser = use_ser
        self.pinned = pinned

    def forward(self, cls, t_hat):
        """cls (B, 6, D), t_hat (B, D) -> O (B, 6, D)."""
        p, E = self.p, self.cfg.num_experts
        B, S, D = cls.shape
        if not self.use_ser:
            out, u = expert_forward(cls, p, 0)
            return cls + out, ("dense", cls, u)
        x = np.concatenate([cls, np.broadcast_to(t_hat[:, None, :], (B, S, D))], axis=-1)   # (B, 6, 2D)
        logits = np.einsum("bsi,sie->bse", x, p["ser.gate"])
        dec = route_from_logits(logits, self.cfg.top_k)
        if self.pinned is not None:
            shape = logits.shape[:-1] + (1,)
            dec = RoutingDecision(dec.gates, np.full(shape, self.pinned, dtype=np.int64), np.ones(shape))
        W = dense_weights(dec, E)
        outs, us = [], []
        for j in range(E):
            o, u = expert_forward(cls, p, j)
            outs.append(o)
            us.append(u)
        outs = np.stack(outs, axis=-2)                                                     # (B, 6, E, D)
        O = cls + np.einsum("bse,bsed->bsd", W, outs)
        return O, ("moe", x, dec, W, outs, us)

    def backward(self, dO, cache, grads):
        """Returns (dcls, dt_hat)."""
        p = self.p
        if cache[0] == "dense":
            _, cls, u = cache
            return dO + self._expert_backward(dO, cls, u, 0, grads), None
        _, x, dec, W, outs, us = cache
        B, S, D = dO.shape
        cls = x[..., :D]
        dcls = dO.copy()
        for j in range(self.cfg.num_experts):
            wj = W[..., j]
            if not wj.any():
                continue
            dcls += self._expert_backward(dO * wj[..., None], cls, us[j], j, grads)
        # selection held fixed; gradients flow through the renormalized weights
        dWsel = np.take_along_axis(np.einsum("bsd,bsed->bse", dO, outs), dec.selected, axis=-1)
        gsel = np.take_along_axis(dec.gates, dec.selected, axis=-1)
        tot = gsel.sum(axis=-1, keepdims=True)
        dgsel = (dWsel - (dWsel * dec.weights).sum(axis=-1, keepdims=True)) / tot
        dg = np.zeros_like(dec.gates)
        np.put_along_axis(dg, dec.selected, dgsel, axis=-1)
        dlogits = nc.softmax_backward(dg, dec.gates, axis=-1)
        grads["ser.gate"] += np.einsum("bsi,bse->sie", x, dlogits)
        dx = np.einsum("bse,sie->bsi", dlogits, p["ser.gate"])
        dcls += dx[..., :D]
        return dcls, dx[..., D:].sum(axis=1)

    def _expert_backward(self, dout, x, u, j, grads):
        p = self.p
        h = nc.gelu(u)
        grads["ser.W2"][j] += h.reshape(-1, h.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        grads["ser.b2"][j] += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        du = nc.gelu_backward(dout @ p["ser.W2"][j].T, u)
        grads["ser.W1"][j] += x.reshape(-1, x.shape[-1]).T @ du.reshape(-1, du.shape[-1])
        grads["ser.b1"][j] += du.reshape(-1, du.shape[-1]).sum(axis=0)
        return du @ p["ser.W1"][j].T
