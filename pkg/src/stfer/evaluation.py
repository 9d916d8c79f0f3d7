"""Retrieval metrics: cosine distances, CMC rank-k, mAP, and the any-time average."""
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .synth_data import SCENARIOS, membership_masks

RANKS = (1, 5, 10)


def distance_matrix(queries, gallery, legal=None):
    """Cosine distance 1 - <a, b> / (|a| |b|); pairs where ``legal`` is False
    are set to +inf (excluded from ranking)."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("zero-norm descriptor; cosine distance undefined")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(g))):
        raise ValueError("non-finite descriptor")
    d = 1.0 - (q / qn[:, None]) @ (g / gn[:, None]).T
    if legal is not None:
        d = np.where(legal, d, np.inf)
    return d


def rank_stats(dist, query_ids, gallery_ids):
    """Per query: 0-based rank of the first correct match among finite entries
    (-1 if none) and its average precision (nan if no positives)."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[1] == 0:
        raise ValueError("empty gallery")
    matches = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return kernels.rank_queries(np.ascontiguousarray(dist), np.ascontiguousarray(matches))


def cmc_rank_k(dist, query_ids, gallery_ids, k):
    first, _ = rank_stats(dist, query_ids, gallery_ids)
    valid = first >= 0
    if not valid.any():
        return float("nan")
    return float(np.mean(first[valid] < k))


def mean_ap(dist, query_ids, gallery_ids):
    _, ap = rank_stats(dist, query_ids, gallery_ids)
    ap = ap[np.isfinite(ap)]
    return float(ap.mean()) if ap.size else float("nan")


def any_time_average(per_scenario):
    """Arithmetic mean of (r1, map) across the six scenarios."""
    missing = [s for s in SCENARIOS if s not in per_scenario]
    if missing:
        raise ValueError(f"any-time average needs all six scenarios; missing {missing}")
    r1 = float(np.mean([per_scenario[s]["r1"] for s in SCENARIOS]))
    mp = float(np.mean([per_scenario[s]["map"] for s in SCENARIOS]))
    return r1, mp


@dataclass
class EvalReport:
    per_scenario: dict                      # scenario -> {r1, r5, r10, map}
    any_time: dict                          # {r1, map}
    meta: dict = field(default_factory=dict)  # scenario -> {queries, skipped}, mode, ...

    @classmethod
    def from_scenarios(cls, per_scenario, meta=None):
        r1, mp = any_time_average(per_scenario)
        return cls(per_scenario, {"r1": r1, "map": mp}, meta or {})

    def to_dict(self):
        d = {s: dict(self.per_scenario[s]) for s in SCENARIOS}
        d["any_time"] = dict(self.any_time)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self):
        lines = [f"{'scenario':<10}{'R1':>8}{'R5':>8}{'R10':>8}{'mAP':>8}{'queries':>9}{'skipped':>9}"]
        for s in SCENARIOS:
            r = self.per_scenario[s]
            m = self.meta.get(s, {})
            lines.append(f"{s:<10}{100 * r['r1']:8.2f}{100 * r['r5']:8.2f}{100 * r['r10']:8.2f}"
                         f"{100 * r['map']:8.2f}{m.get('queries', 0):9d}{m.get('skipped', 0):9d}")
        lines.append(f"{'Any-Time':<10}{100 * self.any_time['r1']:8.2f}{'':>16}{100 * self.any_time['map']:8.2f}")
        return "\n".join(lines)


def evaluate_descriptors(desc, meta, query_idx=None, gallery_idx=None):
    """Scenario-wise retrieval over ``desc`` (N, 6, D) with per-sample ``meta``.

    Defaults to all-vs-all: every sample is a query against every other, with
    self-matches removed by the junk rule (same identity, camera, session).
    """
    n = len(meta)
    query_idx = np.arange(n) if query_idx is None else np.asarray(query_idx)
    gallery_idx = np.arange(n) if gallery_idx is None else np.asarray(gallery_idx)
    if gallery_idx.size == 0:
        raise ValueError("empty gallery")
    qm = [meta[i] for i in query_idx]
    gm = [meta[i] for i in gallery_idx]
    legal = membership_masks(qm, gm)
    qids = np.array([m.identity for m in qm])
    gids = np.array([m.identity for m in gm])
    per, info = {}, {}
    for s_i, s in enumerate(SCENARIOS):
        dist = distance_matrix(desc[query_idx, s_i], desc[gallery_idx, s_i], legal[s])
        first, ap = rank_stats(dist, qids, gids)
        valid = first >= 0
        per[s] = {f"r{k}": float(np.mean(first[valid] < k)) if valid.any() else float("nan") for k in RANKS}
        per[s]["map"] = float(np.mean(ap[valid])) if valid.any() else float("nan")
        info[s] = {"queries": int(valid.sum()), "skipped": int((~valid).sum())}
    return EvalReport.from_scenarios(per, info)


def chance_r1(meta, query_idx=None, gallery_idx=None):
    """Expected Any-Time R1 of a uniformly random ranking: per scenario, the
    mean over answerable queries of (#positives / #legal gallery entries)."""
    n = len(meta)
    query_idx = np.arange(n) if query_idx is None else np.asarray(query_idx)
    gallery_idx = np.arange(n) if gallery_idx is None else np.asarray(gallery_idx)
    qm = [meta[i] for i in query_idx]
    gm = [meta[i] for i in gallery_idx]
    legal = membership_masks(qm, gm)
    same = np.array([m.identity for m in qm])[:, None] == np.array([m.identity for m in gm])[None, :]
    vals = []
    for s in SCENARIOS:
        pos = (legal[s] & same).sum(axis=1)
        tot = legal[s].sum(axis=1)
        ok = pos > 0
        vals.append(float(np.mean(pos[ok] / tot[ok])) if ok.any() else 0.0)
    return float(np.mean(vals))
