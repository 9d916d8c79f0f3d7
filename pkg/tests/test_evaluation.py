import json

import numpy as np
import pytest

from stfer import verify
from stfer.evaluation import (EvalReport, any_time_average, chance_r1, cmc_rank_k, distance_matrix,
                              evaluate_descriptors, mean_ap, rank_stats)
from stfer.synth_data import SCENARIOS, SampleMeta


def test_cosine_distance_and_illegal_pairs():
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = np.array([[3.0, 0.0], [1.0, 1.0]])
    d = distance_matrix(q, g)
    assert np.allclose(d, [[0.0, 1 - 1 / np.sqrt(2)], [1.0, 1 - 1 / np.sqrt(2)]])
    d = distance_matrix(q, g, legal=np.array([[True, False], [True, True]]))
    assert np.isinf(d[0, 1])
    with pytest.raises(ValueError):
        distance_matrix(np.zeros((1, 2)), g)


def test_perfect_ranking():
    d = np.array([[0.1, 0.5, 0.9], [0.8, 0.2, 0.3]])
    q, g = np.array([0, 1]), np.array([0, 1, 1])
    assert cmc_rank_k(d, q, g, 1) == 1.0 and mean_ap(d, q, g) == 1.0


def test_single_positive_at_rank_r():
    d = np.array([[0.1, 0.2, 0.3, 0.4]])
    first, ap = rank_stats(d, np.array([7]), np.array([1, 2, 7, 3]))
    assert first[0] == 2 and ap[0] == pytest.approx(1 / 3, abs=1e-15)
    assert cmc_rank_k(d, [7], [1, 2, 7, 3], 1) == 0.0 and cmc_rank_k(d, [7], [1, 2, 7, 3], 5) == 1.0


def test_no_positive_query_skipped_and_empty_gallery():
    d = np.array([[0.1, 0.2], [0.3, 0.4]])
    first, ap = rank_stats(d, np.array([0, 9]), np.array([0, 1]))
    assert first[1] == -1 and np.isnan(ap[1])
    assert cmc_rank_k(d, [0, 9], [0, 1], 1) == 1.0
    with pytest.raises(ValueError):
        rank_stats(np.zeros((2, 0)), [0, 1], [])


def test_illegal_positive_is_ignored():
    d = np.array([[np.inf, 0.5, 0.1]])
    first, _ = rank_stats(d, np.array([1]), np.array([1, 1, 2]))
    assert first[0] == 1


def test_loop_oracle_agreement():
    for c in verify.retrieval_suite(instances=100, seed=5):
        assert c.passed, c.line()


def test_any_time_average_published_row():
    for c in verify.any_time_suite():
        assert c.passed, c.line()
    with pytest.raises(ValueError, match="missing"):
        any_time_average({"DT-ST": {"r1": 1, "map": 1}})


def test_any_time_equal_scenarios():
    per = {s: {"r1": 0.5, "map": 0.25} for s in SCENARIOS}
    assert any_time_average(per) == (0.5, 0.25)


def toy_meta():
    ms = []
    for ident in range(3):
        for cam, mod in ((0, "RGB"), (1, "RGB"), (2, "IR"), (3, "IR")):
            for session in range(2):
                ms.append(SampleMeta(ident, session, mod, session, cam, 0))
    return ms


def test_evaluate_descriptors_report():
    ms = toy_meta()
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 6, 8))
    desc = np.stack([centers[m.identity] + 0.01 * rng.normal(size=(6, 8)) for m in ms])
    rep = evaluate_descriptors(desc, ms)
    for s in SCENARIOS:
        assert rep.per_scenario[s]["r1"] == 1.0 and rep.per_scenario[s]["map"] == pytest.approx(1.0)
    d = json.loads(rep.to_json())
    assert set(d) == set(SCENARIOS) | {"any_time"} and set(d["any_time"]) == {"r1", "map"}
    assert set(d["DT-ST"]) == {"r1", "r5", "r10", "map"}
    assert "Any-Time" in rep.to_text()
    assert rep.any_time["r1"] == pytest.approx(np.mean([rep.per_scenario[s]["r1"] for s in SCENARIOS]))


def test_chance_level_matches_random_rankings():
    ms = toy_meta()
    rng = np.random.default_rng(1)
    r1s = [evaluate_descriptors(rng.normal(size=(len(ms), 6, 4)), ms).any_time["r1"] for _ in range(400)]
    assert abs(np.mean(r1s) - chance_r1(ms)) < 0.03
