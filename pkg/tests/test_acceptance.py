"""One PASS/FAIL line per acceptance criterion (see the terminal summary)."""
import time

import numpy as np
import pytest

from stfer import verify
from stfer.checkpoint import dumps, loads
from stfer.config import TrainConfig
from stfer.evaluation import chance_r1
from stfer.training import dataset_for, evaluate, export_heatmap, initial_checkpoint, train

CPU_BUDGET = 600.0     # seconds per desk training run


def summarize(checks):
    bad = [c for c in checks if not c.passed]
    worst = max(checks, key=lambda c: c.value / c.bound if c.bound else c.value)
    return not bad, "; ".join(c.line() for c in bad) or f"{len(checks)} checks, tightest: {worst.line()}"


def test_c1_any_time_average(record):
    ok, detail = summarize(verify.any_time_suite())
    assert record(1, "published per-scenario table averages to 94.54 / 93.46", ok, detail)


def test_c2_gradient_checks(record):
    t0 = time.perf_counter()
    checks = verify.gradient_suite(points=100)
    dt = time.perf_counter() - t0
    ok, detail = summarize(checks)
    ok = ok and dt < 120
    assert record(2, "gradient checks, 9 ops x 100 points, h=1e-5, rel err < 1e-4", ok, f"{dt:.1f}s; {detail}")


def test_c3_retrieval_oracles(record):
    ok, detail = summarize(verify.retrieval_suite(instances=200))
    assert record(3, "CMC exact and mAP within 1e-9 of loop oracles, 200 instances", ok, detail)


def test_c4_filter_invariants(record):
    ok, detail = summarize(verify.svtf_suite())
    assert record(4, "text-filter invariants", ok, detail)


def test_c5_router_invariants(record):
    ok, detail = summarize(verify.ser_suite(draws=100_000))
    assert record(5, "expert-router invariants", ok, detail)


def timed_train(cfg, ds):
    t0 = time.process_time()
    ck = train(cfg, ds)
    return ck, time.process_time() - t0


@pytest.mark.slow
def test_c6_desk_end_to_end(record):
    cfg = TrainConfig()
    assert (cfg.num_train, cfg.num_ids - cfg.num_train, cfg.embed_dim, cfg.depth) == (40, 20, 64, 2)
    ds = dataset_for(cfg)
    test_meta = [ds.meta[i] for i in ds.indices(ds.test_ids)]
    chance = chance_r1(test_meta)
    untrained = evaluate(initial_checkpoint(cfg, ds), ds).any_time
    full, t_full = timed_train(cfg, ds)
    r_full = evaluate(full, ds).any_time
    base, t_base = timed_train(cfg.replace(use_text=False, use_svtf=False, use_ser=False), ds)
    r_base = evaluate(base, ds).any_time
    parts = {
        "full R1 >= 0.85": r_full["r1"] >= 0.85,
        "untrained R1 <= 3x chance": untrained["r1"] <= 3 * chance,
        "full R1 >= baseline R1": r_full["r1"] >= r_base["r1"],
        "CPU <= 10 min per run": max(t_full, t_base) <= CPU_BUDGET,
        "final loss < 10% of epoch 1": full.loss_trace[-1] < 0.1 * full.loss_trace[0],
    }
    detail = (f"full R1={r_full['r1']:.4f} mAP={r_full['map']:.4f} ({t_full:.0f}s); "
              f"baseline R1={r_base['r1']:.4f} mAP={r_base['map']:.4f} ({t_base:.0f}s); "
              f"untrained R1={untrained['r1']:.4f} vs 3x chance={3 * chance:.4f}; "
              f"failed: {[k for k, v in parts.items() if not v]}")
    assert record(6, "desk end-to-end (40/20 ids, D=64, depth 2)", all(parts.values()), detail)


def test_c7_determinism_and_persistence(record, tmp_path):
    cfg = TrainConfig(epochs=3)
    ds = dataset_for(cfg)
    a, b = train(cfg, ds), train(cfg, ds)
    same_trace = a.loss_trace == b.loss_trace
    raw = dumps(a)
    round_trip = dumps(loads(raw)) == raw
    h1, h2 = tmp_path / "h1.pgm", tmp_path / "h2.pgm"
    export_heatmap(a, ds, 5, "DT-ST", h1)
    export_heatmap(loads(raw), ds, 5, "DT-ST", h2)
    same_heat = h1.read_bytes() == h2.read_bytes()
    ok = same_trace and round_trip and same_heat
    detail = f"loss traces equal={same_trace} ckpt bytes equal={round_trip} heatmap bytes equal={same_heat}"
    assert record(7, "determinism and persistence", ok, detail)


def test_c8_ablation_equivalences(record):
    ok, detail = summarize(verify.ablation_suite())
    assert record(8, "--no-svtf == zeroed filter, --no-ser == forced single expert", ok, detail)
