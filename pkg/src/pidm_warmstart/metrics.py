"""Evaluation arithmetic and report emission for multi-seed training runs."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_core import ConfigurationError

NOT_CONVERGED = None
BASELINE_METHOD = "random_pidm"
TABLE1_METHODS = ("vanilla_mlp", "random_pidm", "pretrained_both")
SUBMODULE_ORDER = ("history_encoders", "backbone", "intention_encoder", "action_synthesizer", "mlp")


class ReportError(RuntimeError):
    pass


# --------------------------------------------------------------- single curves

def final_performance(values, tail: int = 50) -> float:
    """Mean of the last ``tail`` indicator values."""
    values = np.asarray(values, dtype=np.float64)
    if tail < 1:
        raise ConfigurationError("tail window must be >= 1")
    if values.size < tail:
        raise ConfigurationError(f"curve of length {values.size} is shorter than the tail window {tail}")
    return float(values[-tail:].mean())


def final_perf_increase(final: float, baseline_final: float) -> float:
    """Percent change of ``final`` relative to ``baseline_final``."""
    if baseline_final == 0:
        raise ConfigurationError("baseline final performance is zero; shift the indicator first")
    return 100.0 * (final - baseline_final) / abs(baseline_final)


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists so far."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ConfigurationError("smoothing window must be >= 1")
    # direct window means: a cumulative-sum difference would perturb the
    # threshold crossings by rounding
    return np.array([values[max(0, i - window + 1):i + 1].mean() for i in range(values.size)])


def iterations_to_converge(values, baseline_final: float, window: int = 10, fraction: float = 0.9,
                           iterations=None):
    """First iteration whose smoothed indicator reaches ``fraction * baseline_final``.

    Returns :data:`NOT_CONVERGED` (``None``) if the threshold is never reached.
    ``iterations`` maps curve positions to iteration numbers (default 0, 1, ...).
    """
    s = smooth(values, window)
    hit = np.flatnonzero(s >= fraction * baseline_final)
    if hit.size == 0:
        return NOT_CONVERGED
    i = int(hit[0])
    return int(iterations[i]) if iterations is not None else i


def relative_iterations(iters, baseline_iters) -> float:
    """Percent change in iterations-to-converge; ``nan`` when either side is undefined."""
    if iters is None or baseline_iters is None or baseline_iters == 0:
        return math.nan
    return 100.0 * (iters - baseline_iters) / baseline_iters


def indicator_shift(curves) -> float:
    """Offset making every (smoothed) indicator of a task non-negative; 0 if already so."""
    lows = [float(np.min(np.asarray(c, dtype=np.float64))) for c in curves if len(c)]
    if not lows:
        return 0.0
    return max(0.0, -min(lows))


# ------------------------------------------------------------------ run sets

@dataclass
class Run:
    task: str
    method: str
    seed: int
    status: str = "ok"
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weight_updates: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.values.size > 0 and bool(np.all(np.isfinite(self.values)))


def _stats(xs) -> dict:
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    if not xs:
        return {"mean": math.nan, "median": math.nan, "min": math.nan, "max": math.nan}
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "median": float(np.median(a)), "min": float(a.min()),
            "max": float(a.max())}


def aggregate_seeds(runs: list[Run], tail: int = 50, window: int = 10, baseline: str = BASELINE_METHOD):
    """Per ``(task, method)`` metrics over successful seeds.

    Relative metrics compare against ``baseline`` on the same task, after
    shifting the task's indicator so it is non-negative. Iterations to
    converge use the threshold ``0.9 * (mean baseline final)``.
    Returns a list of row dicts ordered by task then method.
    """
    rows = []
    for task in sorted({r.task for r in runs}):
        task_runs = [r for r in runs if r.task == task]
        good = [r for r in task_runs if r.ok]
        shift = indicator_shift([smooth(r.values, window) for r in good])
        base_runs = [r for r in good if r.method == baseline]
        base_final = None
        if base_runs:
            base_final = float(np.mean([final_performance(r.values + shift, tail) for r in base_runs]))
        base_iters = None
        if base_final is not None:
            its = [iterations_to_converge(r.values + shift, base_final, window, iterations=r.iterations)
                   for r in base_runs]
            base_iters = _stats(its)["mean"]
            base_iters = None if math.isnan(base_iters) else base_iters
        for method in sorted({r.method for r in task_runs}):
            mine = [r for r in task_runs if r.method == method]
            ok = [r for r in mine if r.ok]
            row = {"task": task, "method": method, "runs": len(mine), "failed": len(mine) - len(ok),
                   "shift": shift}
            if not ok:
                row["status"] = "failed"
                rows.append(row)
                continue
            row["status"] = "ok"
            finals = [final_performance(r.values + shift, tail) for r in ok]
            fs = _stats(finals)
            row.update({f"final_{k}": v for k, v in fs.items()})
            if base_final is not None and base_final != 0:
                row["final_increase_pct"] = final_perf_increase(fs["mean"], base_final)
                its = [iterations_to_converge(r.values + shift, base_final, window, iterations=r.iterations)
                       for r in ok]
                st = _stats(its)
                row.update({f"iters_{k}": v for k, v in st.items()})
                row["not_converged"] = sum(i is None for i in its)
                row["iters_change_pct"] = relative_iterations(
                    None if math.isnan(st["mean"]) else st["mean"], base_iters)
            rows.append(row)
    return rows


def weight_update_report(runs: list[Run], iterations: int = 100) -> list[dict]:
    """Seed-mean update magnitude per (iteration, network, submodule), one column per method."""
    acc: dict = {}
    methods = sorted({r.method for r in runs if r.weight_updates})
    for r in runs:
        for wu in r.weight_updates:
            it = int(wu["iteration"])
            if it >= iterations:
                continue
            key = (r.task, it, wu["network"], wu["submodule"])
            acc.setdefault(key, {}).setdefault(r.method, []).append(float(wu["value"]))
    order = {s: i for i, s in enumerate(SUBMODULE_ORDER)}
    rows = []
    for key in sorted(acc, key=lambda k: (k[0], k[1], k[2], order.get(k[3], 99), k[3])):
        task, it, net, sub = key
        row = {"task": task, "iteration": it, "network": net, "submodule": sub}
        for m in methods:
            vals = acc[key].get(m)
            row[m] = float(np.mean(vals)) if vals else math.nan
        rows.append(row)
    return rows


def coverage_projection(datasets: dict) -> dict:
    """Project every dataset onto the two principal axes of their union."""
    if len(datasets) < 2:
        raise ConfigurationError("coverage projection needs at least two datasets")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in datasets.items()}
    dims = {a.shape[1] for a in arrays.values()}
    if len(dims) != 1:
        raise ConfigurationError("datasets have different channel layouts")
    union = np.concatenate(list(arrays.values()))
    mean = union.mean(axis=0)
    _, _, vt = np.linalg.svd(union - mean, full_matrices=False)
    axes = vt[:2]
    # fix the sign of each axis so the projection does not flip between runs
    for i in range(axes.shape[0]):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return {k: (a - mean) @ axes.T for k, a in arrays.items()}


def projection_csv(proj: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "pc1", "pc2"])
    for name in sorted(proj):
        for p in proj[name]:
            w.writerow([name, _fmt(p[0]), _fmt(p[1])])
    return buf.getvalue()


# ------------------------------------------------------------------ emission

def _fmt(v) -> str:
    if v is None:
        return "not_converged"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        return f"{float(v):.6g}"
    return str(v)


def rows_to_csv(rows: list[dict], columns=None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, math.nan)) if c in r else "" for c in columns])
    return buf.getvalue()


TABLE_COLUMNS = ["task", "method", "status", "runs", "failed", "shift", "final_mean", "final_median",
                 "final_min", "final_max", "final_increase_pct", "iters_mean", "iters_median", "iters_min",
                 "iters_max", "not_converged", "iters_change_pct"]


def read_run(run_dir) -> Run:
    """Load one CLI run directory (``run.json``, ``curves.csv``, ``weight_updates.csv``)."""
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / "run.json").read_text())
        with open(run_dir / "curves.csv", newline="") as f:
            reader = csv.DictReader(f)
            curve = list(reader)
        if not {"iteration", "mean_reward"} <= set(reader.fieldnames or ()):
            raise ValueError("curves.csv lacks iteration/mean_reward columns")
        its = np.array([int(r["iteration"]) for r in curve], dtype=np.int64)
        vals = np.array([float(r["mean_reward"]) for r in curve], dtype=np.float64)
        wu = []
        wpath = run_dir / "weight_updates.csv"
        if wpath.exists():
            with open(wpath, newline="") as f:
                wu = list(csv.DictReader(f))
        return Run(meta["task"], meta["method"], int(meta["seed"]), meta.get("status", "ok"), its, vals, wu)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ReportError(f"{run_dir}: cannot parse run ({e})") from None


def find_runs(root) -> list[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.rglob("run.json"))


def build_report(run_dirs, out_dir, tail=50, window=10) -> dict:
    """Write table1.csv, ablation.csv, weight_updates.csv and summary.json; return the summary."""
    runs = [read_run(d) for d in run_dirs]
    if not runs:
        raise ReportError("no runs found")
    rows = aggregate_seeds(runs, tail, window)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    main = [r for r in rows if r["method"] in TABLE1_METHODS]
    ablation = [r for r in rows if r["method"] not in TABLE1_METHODS or r["method"] == BASELINE_METHOD]
    (out / "table1.csv").write_text(rows_to_csv(main, TABLE_COLUMNS))
    (out / "ablation.csv").write_text(rows_to_csv(ablation, TABLE_COLUMNS))
    wrows = weight_update_report(runs)
    (out / "weight_updates.csv").write_text(rows_to_csv(wrows))
    summary = {
        "runs": len(runs),
        "failed": sum(not r.ok for r in runs),
        "tail": tail,
        "smoothing": window,
        "baseline": BASELINE_METHOD,
        "convergence_threshold": "0.9 x seed-mean final performance of the baseline (shifted indicator)",
        "note": ("threshold is referenced to the baseline's final performance; the alternative reading "
                 "'90% of the maximum performance' is not used"),
        "tasks": {},
    }
    for r in rows:
        summary["tasks"].setdefault(r["task"], {})[r["method"]] = {
            k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()
            if k not in ("task", "method")}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
