"""Gradient checks and oracle suites, shared by ``stfer selftest`` and the
acceptance tests.

Every check returns a ``Check`` with the worst observed value and the bound it
must stay under, so callers can print one line per check.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc
from .backbone import NUM_SCENARIOS, ModelConfig
from .evaluation import any_time_average, rank_stats
from .model import STFER, Batch, init_params
from .objective import batch_objective, batch_objective_backward
from .ser import ExpertRouter, draw_keep, route_from_logits, expert_forward
from .svtf import SVTF, filter_tokens, text_to_patch_attention
from .synth_data import SCENARIOS

GRAD_TOL = 1e-4
GRAD_H = 1e-5

# Published per-scenario (R1, mAP) of the full model, in SCENARIOS order, and
# the published any-time pair they should average to.
PUBLISHED_SCENARIOS = {
    "DT-ST": (98.04, 95.72), "DT-LT": (91.89, 90.85), "NT-ST": (95.12, 93.52),
    "NT-LT": (98.00, 97.36), "AD-ST": (89.73, 89.00), "AD-LT": (94.46, 94.29),
}
PUBLISHED_ANY_TIME = (94.54, 93.46)


@dataclass
class Check:
    name: str
    value: float
    bound: float
    passed: bool
    detail: str = ""

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{tag}  {self.name:<44} worst={self.value:.3e}  bound={self.bound:.1e}{extra}"


def _below(name, value, bound, detail=""):
    return Check(name, float(value), bound, bool(value < bound), detail)


def _within(name, value, bound, detail=""):
    return Check(name, float(value), bound, bool(value <= bound), detail)


# --------------------------------------------------------------------------- #
# Gradient checks
# --------------------------------------------------------------------------- #
def _pack(arrs):
    return np.concatenate([a.ravel() for a in arrs])


def _unpack(x, shapes):
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(x[i:i + n].reshape(s))
        i += n
    return out


def _coord_check(fn, arrs, rng, h=GRAD_H):
    """``fn(*arrs) -> (scalar, [grads])``; full central-difference check on
    every coordinate of every input."""
    shapes = [a.shape for a in arrs]
    x = _pack(arrs)
    fx, grads = fn(*arrs)
    return nc.grad_check(lambda z: float(fn(*_unpack(z, shapes))[0]), lambda z: _pack(grads), x, h,
                         floor=resolution_floor(getattr(fx, "mass", abs(fx)), h))


class _Projected(float):
    """A scalar <w, y> that remembers sum |w * y|, the size of the terms
    whose rounding errors it accumulates."""
    mass = 0.0


def _dot(w, y):
    terms = w * y
    f = _Projected(np.sum(terms))
    f.mass = float(np.sum(np.abs(terms)))
    return f


def resolution_floor(mass, h=GRAD_H, tol=GRAD_TOL):
    """Smallest gradient magnitude a central difference at step ``h`` can
    resolve to relative accuracy ``tol``. Round-off in f(x+h) - f(x-h) is
    about eps times the magnitude of the summed terms (``mass``), so the
    quotient carries eps*mass/h absolute noise. Smaller coordinates are
    measured against this floor instead of their own size."""
    return max(1e-8, np.finfo(np.float64).eps * max(1.0, mass) / (h * tol))


def _proj(rng, shape):
    return rng.normal(size=shape)


def grad_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    w = _proj(rng, (3, 5))
    def fn(a, b):
        return _dot(w, nc.matmul(a, b)), list(nc.matmul_backward(w, a, b))
    return _coord_check(fn, [a, b], rng)


def grad_softmax(rng):
    x = rng.normal(scale=2.0, size=(3, 6))
    w = _proj(rng, x.shape)
    def fn(x):
        y = nc.softmax(x, axis=-1)
        return _dot(w, y), [nc.softmax_backward(w, y, axis=-1)]
    return _coord_check(fn, [x], rng)


def grad_tanh_affine(rng):
    s, W, b = rng.normal(size=(5, 1)), rng.normal(size=(1, 4)), rng.normal(size=4)
    w = _proj(rng, (5, 4))
    def fn(s, W, b):
        y = nc.tanh_affine(s, W, b)
        return _dot(w, y), list(nc.tanh_affine_backward(w, s, W, y))
    return _coord_check(fn, [s, W, b], rng)


def grad_cross_entropy(rng):
    x = rng.normal(scale=2.0, size=(4, 7))
    gt = rng.integers(0, 7, size=4)
    c = rng.random(4) + 0.1
    def fn(x):
        return float(np.dot(c, nc.cross_entropy(x, gt))), [nc.cross_entropy_backward(x, gt, c)]
    return _coord_check(fn, [x], rng)


def grad_layer_norm(rng):
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    w = _proj(rng, x.shape)
    def fn(x, g, b):
        y, cache = nc.layer_norm(x, g, b)
        return _dot(w, y), list(nc.layer_norm_backward(w, cache))
    return _coord_check(fn, [x, g, b], rng)


def _tiny_cfg(**kw):
    base = dict(embed_dim=8, depth=2, heads=2, patch=4, image_h=8, image_w=8, text_len=3,
                vocab_size=7, num_classes=5, num_experts=3, top_k=3)
    base.update(kw)
    return ModelConfig(**base)


def grad_svtf(rng):
    """The filter as an encoder hook: z -> z with filtered patch slots, with
    respect to z and all four filter tensors."""
    cfg = _tiny_cfg()
    D, B = cfg.embed_dim, 1
    z = rng.normal(size=(B, cfg.seq_len, D))
    key_mask = np.ones((B, cfg.seq_len), dtype=bool)
    key_mask[0, cfg.text_slice.start + 2:] = False
    ps = {k: rng.normal(size=s) for k, s in (("svtf.Wq", (D, D)), ("svtf.Wk", (D, D)),
                                             ("svtf.Wv", (1, D)), ("svtf.bv", (D,)))}
    names = list(ps)
    w = _proj(rng, z.shape)
    def fn(z, *vals):
        p = dict(zip(names, vals))
        hook = SVTF(p, cfg)
        out, cache = hook.forward(z, key_mask)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dz = hook.backward(w, cache, grads)
        return _dot(w, out), [dz] + [grads[k] for k in names]
    return _coord_check(fn, [z] + [ps[k] for k in names], rng)


def grad_ser_soft(rng):
    """Router with k = E (every expert weighted by its gate), with respect to
    the CLS features, the pooled text and every routing/expert tensor."""
    cfg = _tiny_cfg(embed_dim=2, num_experts=3, top_k=3)
    D, E, B = 2, 3, 2
    p = {"ser.gate": rng.normal(size=(NUM_SCENARIOS, 2 * D, E)), "ser.W1": rng.normal(scale=0.5, size=(E, D, 2 * D)),
         "ser.b1": rng.normal(size=(E, 2 * D)), "ser.W2": rng.normal(scale=0.5, size=(E, 2 * D, D)),
         "ser.b2": rng.normal(size=(E, D))}
    names = list(p)
    cls, t_hat = rng.normal(size=(B, NUM_SCENARIOS, D)), rng.normal(size=(B, D))
    w = _proj(rng, cls.shape)
    def fn(cls, t_hat, *vals):
        q = dict(zip(names, vals))
        r = ExpertRouter(q, cfg)
        O, cache = r.forward(cls, t_hat)
        grads = {k: np.zeros_like(v) for k, v in q.items()}
        dcls, dt = r.backward(w, cache, grads)
        return _dot(w, O), [dcls, dt] + [grads[k] for k in names]
    return _coord_check(fn, [cls, t_hat] + [p[k] for k in names], rng)


def grad_scenario_loss(rng):
    B, D, C = 3, 4, 4
    O, W, b = rng.normal(size=(B, NUM_SCENARIOS, D)), rng.normal(size=(NUM_SCENARIOS, D, C)), rng.normal(size=(NUM_SCENARIOS, C))
    labels = rng.integers(0, C, size=B)
    lam = rng.random(NUM_SCENARIOS)
    sup = (rng.random((B, NUM_SCENARIOS)) < 0.8).astype(float)
    def fn(O, W, b):
        total, _, cache = batch_objective(O, labels, W, b, lam, sup)
        grads = {"head.W": np.zeros_like(W), "head.b": np.zeros_like(b)}
        dO = batch_objective_backward(cache, W, grads)
        return total, [dO, grads["head.W"], grads["head.b"]]
    return _coord_check(fn, [O, W, b], rng)


def _tiny_model(rng, use_text=True, use_svtf=True, use_ser=True, scale=0.3):
    cfg = _tiny_cfg()
    p = init_params(cfg, rng)
    for k in p:
        p[k] = p[k] + rng.normal(scale=scale, size=p[k].shape)
    B = 3
    tok_mask = np.array([[1, 1, 0], [1, 0, 0], [1, 1, 1]], dtype=bool)
    batch = Batch(rng.normal(size=(B, 3, 8, 8)), rng.integers(0, cfg.vocab_size, (B, cfg.text_len)), tok_mask,
                  np.array([1, 0, 1], dtype=bool), np.array([1, 1, 0], dtype=bool), rng.integers(0, 5, size=B))
    return STFER(cfg, p, use_text, use_svtf, use_ser), batch


def grad_full_model(rng):
    """Directional derivative of the total loss along a random direction in
    the full parameter space of a 2-block model (text, filter and routing on)."""
    model, batch = _tiny_model(rng)
    p = model.p
    names = sorted(p)
    shapes = [p[k].shape for k in names]
    _, grads, _ = model.loss_and_grads(batch)
    x = _pack([p[k] for k in names])
    u = rng.normal(size=x.shape)

    def f(z):
        saved = {k: p[k].copy() for k in names}
        for k, v in zip(names, _unpack(z, shapes)):
            p[k][...] = v
        try:
            return model.forward(batch)[0]["loss"]
        finally:
            for k in names:
                p[k][...] = saved[k]
    return nc.directional_check(f, _pack([grads[k] for k in names]), x, u, GRAD_H)


GRADIENT_OPS = {
    "matmul": grad_matmul,
    "softmax": grad_softmax,
    "tanh_affine": grad_tanh_affine,
    "cross_entropy": grad_cross_entropy,
    "layer_norm": grad_layer_norm,
    "svtf composite": grad_svtf,
    "ser soft path (k=E)": grad_ser_soft,
    "scenario loss": grad_scenario_loss,
    "full 2-block model": grad_full_model,
}


def gradient_suite(points=100, seed=0):
    out = []
    for name, fn in GRADIENT_OPS.items():
        rng = np.random.default_rng([seed, len(out)])
        worst = max(fn(rng) for _ in range(points))
        out.append(_below(f"grad {name}", worst, GRAD_TOL, f"points={points}"))
    return out


# --------------------------------------------------------------------------- #
# Retrieval oracles
# --------------------------------------------------------------------------- #
def brute_force_rank(dist, qids, gids):
    """Loop oracle: per query, first-hit rank (-1 if no positive) and AP over
    finite entries, ties broken by gallery index."""
    first, aps = [], []
    for i in range(dist.shape[0]):
        cand = [(dist[i, j], j) for j in range(dist.shape[1]) if math.isfinite(dist[i, j])]
        cand.sort()
        hits, prec, fh = 0, [], -1
        for r, (_, j) in enumerate(cand):
            if qids[i] == gids[j]:
                hits += 1
                prec.append(hits / (r + 1))
                if fh < 0:
                    fh = r
        first.append(fh)
        aps.append(sum(prec) / hits if hits else float("nan"))
    return np.array(first), np.array(aps)


def random_ranking_instance(rng):
    Q, G = int(rng.integers(1, 11)), int(rng.integers(1, 31))
    ids = int(rng.integers(1, 6))
    dist = rng.random((Q, G))
    if rng.random() < 0.5:
        dist = np.round(dist * 4) / 4          # force ties
    dist[rng.random((Q, G)) < 0.2] = np.inf   # illegal pairs
    return dist, rng.integers(0, ids, Q), rng.integers(0, ids, G)


def retrieval_suite(instances=200, seed=0):
    rng = np.random.default_rng(seed)
    cmc_bad, worst_ap = 0, 0.0
    for _ in range(instances):
        dist, q, g = random_ranking_instance(rng)
        f1, a1 = rank_stats(dist, q, g)
        f2, a2 = brute_force_rank(dist, q, g)
        for k in (1, 5, 10):
            if not np.array_equal(f1 < k, f2 < k) or not np.array_equal(f1 >= 0, f2 >= 0):
                cmc_bad += 1
        if not np.array_equal(np.isnan(a1), np.isnan(a2)):
            worst_ap = np.inf
        ok = ~np.isnan(a2)
        if ok.any():
            worst_ap = max(worst_ap, float(np.max(np.abs(a1[ok] - a2[ok]))))
    return [_within("cmc rank-k exact vs loop oracle", cmc_bad, 0, f"instances={instances}"),
            _within("mAP vs loop oracle", worst_ap, 1e-9, f"instances={instances}")]


def any_time_suite():
    per = {s: {"r1": r, "map": m} for s, (r, m) in PUBLISHED_SCENARIOS.items()}
    r1, mp = any_time_average(per)
    return [_within("any-time R1 of published row", abs(r1 - PUBLISHED_ANY_TIME[0]), 0.005, f"got {r1:.4f}"),
            _within("any-time mAP of published row", abs(mp - PUBLISHED_ANY_TIME[1]), 0.005, f"got {mp:.4f}")]


# --------------------------------------------------------------------------- #
# Filter invariants
# --------------------------------------------------------------------------- #
def svtf_suite(trials=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = dict(text_perm=0.0, patch_perm=0.0, bound=0.0, identity=0.0, rows=0.0)
    for _ in range(trials):
        B, L, N, D = 2, int(rng.integers(1, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        t, v = rng.normal(size=(B, L, D)), rng.normal(size=(B, N, D))
        Wq, Wk = rng.normal(size=(D, D)), rng.normal(size=(D, D))
        Wv, bv = rng.normal(scale=5, size=(1, D)), rng.normal(scale=5, size=D)
        mask = rng.random((B, L)) < 0.7
        mask[:, 0] = True
        A, _, _ = text_to_patch_attention(t, v, Wq, Wk)
        out, _ = filter_tokens(v, A, mask, Wv, bv)
        worst["rows"] = max(worst["rows"], float(np.max(np.abs(A.sum(-1) - 1))))
        worst["bound"] = max(worst["bound"], float(np.max(np.abs(out - v))))

        pl = rng.permutation(L)
        A2, _, _ = text_to_patch_attention(t[:, pl], v, Wq, Wk)
        out2, _ = filter_tokens(v, A2, mask[:, pl], Wv, bv)
        worst["text_perm"] = max(worst["text_perm"], float(np.max(np.abs(out2 - out))))

        pn = rng.permutation(N)
        A3, _, _ = text_to_patch_attention(t, v[:, pn], Wq, Wk)
        out3, _ = filter_tokens(v[:, pn], A3, mask, Wv, bv)
        worst["patch_perm"] = max(worst["patch_perm"], float(np.max(np.abs(out3 - out[:, pn]))))

        out0, _ = filter_tokens(v, A, mask, np.zeros_like(Wv), np.zeros_like(bv))
        worst["identity"] = max(worst["identity"], float(np.max(np.abs(out0 - v))))
    return [_within("svtf text-permutation invariance", worst["text_perm"], 1e-9),
            _within("svtf patch-permutation equivariance", worst["patch_perm"], 1e-9),
            _within("svtf residual bound max|v~ - v|", worst["bound"], 1.0),
            _within("svtf W_v = b_v = 0 is identity", worst["identity"], 0.0),
            _within("svtf attention rows sum to 1", worst["rows"], 1e-12)]


# --------------------------------------------------------------------------- #
# Routing invariants
# --------------------------------------------------------------------------- #
def ser_suite(trials=200, draws=100_000, seed=0):
    rng = np.random.default_rng(seed)
    simplex = renorm = dense = 0.0
    for _ in range(trials):
        E, D = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        k = int(rng.integers(1, E + 1))
        logits = rng.normal(scale=3, size=(4, E))
        dec = route_from_logits(logits, k)
        simplex = max(simplex, float(np.max(np.abs(dec.gates.sum(-1) - 1))))
        renorm = max(renorm, float(np.max(np.abs(dec.weights.sum(-1) - 1))))

        p = {"ser.W1": rng.normal(size=(E, D, 3)), "ser.b1": rng.normal(size=(E, 3)),
             "ser.W2": rng.normal(size=(E, 3, D)), "ser.b2": rng.normal(size=(E, D))}
        x = rng.normal(size=D)
        full = route_from_logits(logits[0], E)
        mixed = sum(w * expert_forward(x, p, int(j))[0] for j, w in zip(full.selected, full.weights))
        oracle = sum(full.gates[j] * expert_forward(x, p, j)[0] for j in range(E))
        dense = max(dense, float(np.max(np.abs(mixed - oracle))))

    limit_ok = (draw_keep(draws, 0.0, np.random.default_rng(1)).all()
                and not draw_keep(draws, 1.0, np.random.default_rng(2)).any())
    rate = 1.0 - draw_keep(draws, 0.3, np.random.default_rng(3)).mean()
    return [_within("ser gate simplex sum", simplex, 1e-12),
            _within("ser top-k renormalized sum", renorm, 1e-12),
            _within("ser k=E equals dense mixture", dense, 1e-12),
            _within("ser p_m in {0,1} limits exact", 0.0 if limit_ok else 1.0, 0.0),
            _within("ser masking rate at p_m=0.3", abs(rate - 0.3), 0.01, f"rate={rate:.4f} draws={draws}")]


# --------------------------------------------------------------------------- #
# Ablation toggles
# --------------------------------------------------------------------------- #
def ablation_suite(trials=10, seed=0):
    rng = np.random.default_rng(seed)
    svtf_gap = ser_gap = 0.0
    for _ in range(trials):
        model, batch = _tiny_model(rng, scale=0.5)
        p, cfg = model.p, model.cfg
        off = STFER(cfg, p, use_text=True, use_svtf=False, use_ser=True).descriptors(batch)
        zp = dict(p, **{"svtf.Wv": np.zeros_like(p["svtf.Wv"]), "svtf.bv": np.zeros_like(p["svtf.bv"])})
        zeroed = STFER(cfg, zp, use_text=True, use_svtf=True, use_ser=True).descriptors(batch)
        svtf_gap = max(svtf_gap, float(np.max(np.abs(off - zeroed))))

        no_ser = STFER(cfg, p, use_text=True, use_svtf=True, use_ser=False).descriptors(batch)
        forced = _forced_single_expert(cfg, p, batch)
        ser_gap = max(ser_gap, float(np.max(np.abs(no_ser - forced))))
    return [_within("--no-svtf == zeroed filter params", svtf_gap, 1e-12),
            _within("--no-ser == forced single expert", ser_gap, 1e-12)]


def _forced_single_expert(cfg, p, batch):
    """Gated model with every routing decision pinned to expert 0, k=1."""
    model = STFER(cfg, p, use_text=True, use_svtf=True, use_ser=True)
    model.router = ExpertRouter(p, cfg, use_ser=True, pinned=0)
    return model.descriptors(batch)


# --------------------------------------------------------------------------- #
def run_selftest(quick=False, out=print):
    checks = any_time_suite()
    checks += gradient_suite(points=10 if quick else 100)
    checks += retrieval_suite(instances=50 if quick else 200)
    checks += svtf_suite()
    checks += ser_suite(draws=100_000)
    checks += ablation_suite()
    for c in checks:
        out(c.line())
    ok = all(c.passed for c in checks)
    out(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return ok
