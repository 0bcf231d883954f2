import csv
import json
import math

import numpy as np
import pytest

from pidm_warmstart.metrics import (Run, ReportError, aggregate_seeds, build_report, coverage_projection,
                                    final_perf_increase, final_performance, indicator_shift,
                                    iterations_to_converge, relative_iterations, smooth, weight_update_report)
from pidm_warmstart.nn_core import ConfigurationError


def ramp(reach_at, final=1.0, n=400):
    """Curve rising linearly to ``final`` and first reaching 0.9*final at ``reach_at``."""
    x = np.arange(n, dtype=float)
    below = 0.5 * final * x / reach_at
    above = np.minimum(0.9 * final + 0.01 * (x - reach_at), final)
    return np.where(x < reach_at, below, above)


def test_final_performance():
    assert final_performance(np.full(60, 2.5)) == 2.5
    assert final_performance([5.0, 1.0, 3.0], tail=2) == 2.0
    with pytest.raises(ConfigurationError):
        final_performance([1.0, 2.0], tail=3)


def test_final_perf_increase_examples():
    assert final_perf_increase(4.0, 4.0) == 0.0
    assert final_perf_increase(1.075 * 4.0, 4.0) == pytest.approx(7.5)
    assert final_perf_increase(0.9 * 4.0, 4.0) == pytest.approx(-10.0)
    with pytest.raises(ConfigurationError):
        final_perf_increase(1.0, 0.0)


def test_smoothing_is_trailing_with_partial_start():
    np.testing.assert_allclose(smooth([1.0, 3.0, 5.0, 7.0], 2), [1.0, 2.0, 4.0, 6.0])
    np.testing.assert_allclose(smooth([2.0, 4.0], 10), [2.0, 3.0])


def test_iterations_to_converge_worked_example():
    base = ramp(200)
    fast = ramp(120)
    # window 1 removes smoothing so the crossing index is exact
    it_b = iterations_to_converge(base, 1.0, window=1)
    it_f = iterations_to_converge(fast, 1.0, window=1)
    assert (it_b, it_f) == (200, 120)
    assert relative_iterations(it_f, it_b) == pytest.approx(-40.0)
    assert relative_iterations(it_b, it_b) == 0.0


def test_iterations_with_smoothing_hand_value():
    curve = np.array([0, 0, 0, 9, 9, 9, 9], dtype=float)
    # smoothed with window 2: 0 0 0 4.5 9 9 9; threshold 0.9 * 9 = 8.1
    assert iterations_to_converge(curve, 9.0, window=2) == 4
    assert iterations_to_converge(curve, 9.0, window=2, iterations=np.arange(7) * 10) == 40


def test_not_converged_sentinel():
    assert iterations_to_converge(np.zeros(50), 1.0) is None
    assert math.isnan(relative_iterations(None, 10))


def test_indicator_shift():
    assert indicator_shift([np.array([1.0, 2.0])]) == 0.0
    assert indicator_shift([np.array([-3.0, 2.0]), np.array([-1.0])]) == 3.0


def make_runs(method, curves, task="reach", status="ok"):
    return [Run(task, method, i, status, np.arange(len(c)), np.asarray(c, dtype=float)) for i, c in enumerate(curves)]


def test_aggregate_identical_curves_zero_spread_and_self_comparison():
    c = ramp(100, n=200)
    runs = make_runs("random_pidm", [c] * 5) + make_runs("pretrained_both", [c] * 5)
    rows = {r["method"]: r for r in aggregate_seeds(runs, tail=50, window=10)}
    for r in rows.values():
        assert r["final_min"] == r["final_max"]
        assert r["iters_min"] == r["iters_max"]
        assert r["final_increase_pct"] == 0.0 and r["iters_change_pct"] == 0.0


def test_aggregate_excludes_failed_runs():
    c = ramp(100, n=200)
    runs = make_runs("random_pidm", [c] * 4)
    runs.append(Run("reach", "random_pidm", 9, "diverged", np.arange(3), np.array([0.0, 1.0, np.nan])))
    row = aggregate_seeds(runs, tail=50)[0]
    assert (row["runs"], row["failed"]) == (5, 1)
    assert row["final_mean"] == pytest.approx(1.0)


def test_aggregate_all_failed():
    runs = make_runs("pretrained_both", [[0.0] * 60], status="diverged") + make_runs("random_pidm", [ramp(10, n=60)])
    rows = {r["method"]: r for r in aggregate_seeds(runs, tail=50)}
    assert rows["pretrained_both"]["status"] == "failed"
    assert "final_mean" not in rows["pretrained_both"]


def test_aggregate_worked_table_values():
    # baseline reaches 0.9 at 200 and ends at 1.0; the other ends 7.5% higher and
    # reaches the baseline threshold at 120
    n = 400
    base = ramp(200, 1.0, n)
    other = np.where(np.arange(n) < 120, 0.0, 0.9)
    other[300:] = 1.075
    runs = make_runs("random_pidm", [base]) + make_runs("pretrained_both", [other])
    rows = {r["method"]: r for r in aggregate_seeds(runs, tail=50, window=1)}
    assert rows["pretrained_both"]["final_increase_pct"] == pytest.approx(7.5)
    assert rows["pretrained_both"]["iters_change_pct"] == pytest.approx(-40.0)


def test_weight_update_report_columns():
    wu = [{"iteration": 0, "network": "actor", "submodule": "backbone", "value": v} for v in (0.1, 0.3)]
    runs = [Run("reach", "pretrained_both", 0, weight_updates=[wu[0]]),
            Run("reach", "pretrained_both", 1, weight_updates=[wu[1]]),
            Run("reach", "random_pidm", 0, weight_updates=[dict(wu[0], value=0.0)])]
    rows = weight_update_report(runs)
    assert rows == [{"task": "reach", "iteration": 0, "network": "actor", "submodule": "backbone",
                     "pretrained_both": pytest.approx(0.2), "random_pidm": 0.0}]


def test_coverage_projection():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((200, 4))
    same = coverage_projection({"x": a, "y": a.copy()})
    np.testing.assert_array_equal(same["x"], same["y"])
    b = rng.standard_normal((200, 4)) + np.array([6.0, 0, 0, 0])
    proj = coverage_projection({"a": a, "b": b})
    allp = np.concatenate([proj["a"], proj["b"]])
    assert np.allclose(allp.mean(axis=0), 0.0, atol=1e-12)
    # the first axis separates the clusters
    assert proj["a"][:, 0].max() < proj["b"][:, 0].min() or proj["b"][:, 0].max() < proj["a"][:, 0].min()


def write_run(root, task, method, seed, values, status="ok"):
    d = root / task / method / f"seed_{seed}"
    d.mkdir(parents=True)
    (d / "run.json").write_text(json.dumps({"kind": "train", "task": task, "method": method, "seed": seed,
                                            "status": status}))
    with open(d / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "mean_reward"])
        for i, v in enumerate(values):
            w.writerow([i, v])
    return d


def test_build_report_files(tmp_path):
    dirs = [write_run(tmp_path, "reach", m, s, ramp(60 + 10 * s, n=120))
            for m in ("random_pidm", "pretrained_both", "vanilla_mlp") for s in range(2)]
    summary = build_report(dirs, tmp_path / "out", tail=50, window=10)
    for name in ("table1.csv", "ablation.csv", "weight_updates.csv", "summary.json"):
        assert (tmp_path / "out" / name).exists()
    table = list(csv.DictReader(open(tmp_path / "out" / "table1.csv")))
    assert [r["method"] for r in table] == ["pretrained_both", "random_pidm", "vanilla_mlp"]
    assert summary["tasks"]["reach"]["random_pidm"]["final_increase_pct"] == 0.0


def test_unparseable_run(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "run.json").write_text("{")
    with pytest.raises(ReportError):
        build_report([d], tmp_path / "out")
