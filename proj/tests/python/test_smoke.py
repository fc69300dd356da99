import math

import numpy as np
import pytest

import apod

QUICK = {
    "synthetic_counts": [20, 200, 160, 160],
    "pretrain_epochs": 3,
    "pod_epochs": 1,
    "sensitive_epochs": 2,
    "embedding_dim": 8,
    "hidden_dim": 8,
    "budget": 3,
}


def test_fairness_report_by_hand():
    # group 0: tp=1 of 1 positive, fp=0 of 1 negative; group 1: tp=1 of 1, fp=1 of 1
    r = apod.fairness_report([1, 0, 1, 1], [1, 0, 0, 1], [0, 0, 1, 1])
    assert r["accuracy"] == 0.75
    assert r["delta_tpr"] == 0.0
    assert r["delta_fpr"] == -1.0
    assert r["delta_eo_abs"] == 1.0


def test_undefined_rate_is_none():
    r = apod.fairness_report([1, 1], [1, 1], [0, 0])
    assert r["delta_tpr"] is None


def test_bad_input_raises():
    with pytest.raises(ValueError):
        apod.fairness_report([2, 0], [1, 0], [0, 1])
    with pytest.raises(ValueError):
        apod.fairness_report([1], [1, 0], [0, 1])


def test_regularizer_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(12, 2))
    y = [0, 1] * 6
    a = [0] * 6 + [1] * 6
    value, grad = apod.rate_gap_regularizer(logits, y, a)
    assert value >= 0.0
    h = 1e-6
    for i, j in [(0, 0), (5, 1), (11, 0)]:
        up, down = logits.copy(), logits.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (apod.rate_gap_regularizer(up, y, a)[0] - apod.rate_gap_regularizer(down, y, a)[0]) / (2 * h)
        assert abs(fd - grad[i, j]) < 1e-6


def test_max_min_and_coverage():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    assert apod.max_min_select([1, 2], [0], emb) == (2, 3.0)
    assert apod.coverage_radius([0, 1, 2], [0], emb) == 3.0
    assert apod.coverage_radius([0, 1, 2], [0, 1, 2], emb) == 0.0


def test_rank_groups_worst_first():
    ranked = apod.rank_groups([[0.9, 0.5], [0.8, 0.7]])
    a, c, centered = ranked[0]
    assert (a, c) == (0, 1)
    assert math.isclose(centered, 0.5 - 0.6)


def test_budget_and_synthetic():
    assert apod.budget_from_ratio(0.004, 7540) == 30
    d = apod.make_synthetic(counts=[5, 10, 10, 10], seed=1)
    assert d["features"].shape[0] == 35
    assert len(d["labels"]) == 35
    assert set(d["split"]) <= {"train", "val", "test"}


def test_run_spends_budget_and_is_deterministic():
    a = apod.run(QUICK, seed=2)
    b = apod.run(QUICK, seed=2)
    s = a["summary"]
    assert s["status"] == "ok"
    assert s["spent"] == 3
    assert s["audit"]["violations"] == 0
    assert s["audit"]["reveal_reads"] == 3
    assert len(a["iterations"]) == 4
    assert a["annotated"] == b["annotated"]
    assert a["trace_violations"] == []
    assert all(x >= y for x, y in zip(a["coverage"], a["coverage"][1:]))


def test_unknown_option_raises():
    with pytest.raises(ValueError):
        apod.run({"no_such_key": 1})


def test_sweep_and_report(tmp_path):
    opts = dict(QUICK, method="pod_rs", seeds=[0, 1], output_dir=str(tmp_path))
    sw = apod.sweep(opts, [0.5, 1.0])
    assert len(sw["runs"]) == 4
    assert [row["lambda"] for row in sw["table"]] == [0.5, 1.0]
    files = list(tmp_path.rglob("results.jsonl"))
    assert files
    again = apod.report([str(f) for f in files])
    assert sum(row["runs"] for row in again) == 4
