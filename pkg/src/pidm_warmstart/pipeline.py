"""Run-directory orchestration behind the command-line subcommands.

Every function takes an effective :class:`RunConfig`, writes into a fresh
output directory and returns a small summary dict. Nothing here reads the
wall clock into an output file, so reruns with the same config and seed
produce identical bytes.
"""
from __future__ import annotations

import json
import logging
import os
import re
import time
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig
from .data import (DatasetFormatError, TransitionBuffer, build_windows, read_dataset, split_by_episode,
                   write_dataset)
from .envsim import TaskSpec, VecEnv
from .explore import collect_exploration_data
from .nn_core import ConfigurationError
from .pidm import Pidm, evaluate, pretrain
from .ppo import GaussianPolicy, train
from .probe import probe_matrix
from .warmstart import assemble, load_net, normalize_mode, save_net

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PIDM_WARMSTART_OUT"
PIDM_MODES = ("pretrained_both", "pretrained_actor_only", "pretrained_critic_only")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def fresh_dir(path) -> Path:
    """Create ``path``; refuse to write into an existing non-empty directory."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise ConfigurationError(f"output directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path, rows: list[dict], columns=None):
    Path(path).write_text(metrics.rows_to_csv(rows, columns))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _task(cfg: RunConfig, name: str | None = None) -> TaskSpec:
    return TaskSpec(name or cfg.task.name, rewards=cfg.rewards)


def _env_kwargs(cfg: RunConfig) -> dict:
    return {"arm": cfg.arm, "rand": cfg.randomization, "noise": cfg.noise}


# --------------------------------------------------------------- exploration

def run_explore(cfg: RunConfig, out) -> dict:
    out = fresh_dir(out)
    (out / "config.json").write_text(cfg.to_json())
    t0 = time.perf_counter()
    res = collect_exploration_data(cfg.explore, cfg.ppo, cfg.seed, cfg.arm, cfg.randomization, cfg.noise,
                                   cfg.pidm, progress=_progress("explore"))
    records = res.buffer.records()
    windows, skipped = build_windows(records, cfg.pidm.k_hist)
    write_dataset(out / "dataset.bin", records, cfg.arm, cfg.pidm.k_hist, source="exploration",
                  extra={"seed": cfg.seed, "windows": len(windows)})
    write_csv(out / "explore_log.csv", res.log)
    summary = {"kind": "explore", "status": res.status, "message": res.message, "seed": cfg.seed,
               "transitions": int(records.shape[0]), "windows": len(windows), "skipped": skipped,
               "incomplete_windows": res.incomplete_windows, "retrain_iterations": res.retrain_iterations}
    _write_json(out / "run.json", summary)
    summary["seconds"] = time.perf_counter() - t0
    return summary


# --------------------------------------------------------------- pretraining

def run_pretrain(cfg: RunConfig, data_path, out, data_source: str = "exploration") -> dict:
    records, manifest = read_dataset(data_path)
    if manifest.get("source") != data_source:
        raise DatasetFormatError(f"{data_path}: dataset source is {manifest.get('source')!r}, "
                                 f"expected {data_source!r}")
    if manifest.get("k_hist") != cfg.pidm.k_hist:
        raise DatasetFormatError(f"{data_path}: dataset was built for K={manifest.get('k_hist')}, "
                                 f"config has K={cfg.pidm.k_hist}")
    out = fresh_dir(out)
    (out / "config.json").write_text(cfg.to_json())
    t0 = time.perf_counter()
    windows, _ = build_windows(records, cfg.pidm.k_hist)
    s_split, s_train = _seeds(cfg.seed, 2)
    tr, va = split_by_episode(windows, cfg.pretrain.val_fraction, np.random.default_rng(s_split))
    res = pretrain(tr, va, cfg.pretrain, s_train, cfg.noise, cfg.pidm, progress=_progress("pretrain"))
    res.model.save(out / "pidm.ckpt", extra={"data_source": data_source, "best_epoch": res.best_epoch,
                                             "seed": cfg.seed})
    write_csv(out / "loss.csv", [{"epoch": i, "train_loss": a, "val_loss": b}
                                 for i, (a, b) in enumerate(zip(res.train_loss, res.val_loss))])
    rows = evaluate(res.model, va, noise=cfg.noise, seed=s_split)
    write_csv(out / "eval.csv", rows)
    summary = {"kind": "pretrain", "status": res.status, "message": res.message, "seed": cfg.seed,
               "data_source": data_source, "train_windows": len(tr), "val_windows": len(va),
               "best_epoch": res.best_epoch,
               "best_val_loss": min(res.val_loss) if res.val_loss else None}
    _write_json(out / "run.json", summary)
    summary["seconds"] = time.perf_counter() - t0
    summary["eval"] = rows
    return summary


# ------------------------------------------------------------------ training

def run_train(cfg: RunConfig, out, task: str | None = None, init: str | None = None, pidm_path=None,
              seed: int | None = None, record_early: int = 0, method: str | None = None) -> dict:
    task_spec = _task(cfg, task)
    mode = normalize_mode(init or cfg.warmstart.init)
    seed = cfg.seed if seed is None else seed
    pidm_path = pidm_path or cfg.warmstart.pidm_checkpoint or None
    pidm = None
    if mode in PIDM_MODES:
        if not pidm_path:
            raise ConfigurationError(f"init mode {mode} needs a PIDM checkpoint (--pidm)")
        pidm = Pidm.load(pidm_path, cfg.pidm)
    out = fresh_dir(out)
    eff = cfg.to_dict()
    eff.update(seed=seed)
    eff["task"]["name"] = task_spec.name
    eff["warmstart"].update(init=mode, pidm_checkpoint=str(pidm_path or ""))
    _write_json(out / "config.json", eff)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir()
    s_env, s_actor, s_critic, s_train = _seeds(seed, 4)
    env = VecEnv(task_spec, cfg.ppo.num_envs, s_env, k_hist=cfg.pidm.k_hist, **_env_kwargs(cfg))
    warch = cfg.warmstart.arch()
    actor = assemble(None, task_spec.obs_dim, "actor", mode, s_actor, cfg.pidm, warch, pidm=pidm)
    critic = assemble(None, task_spec.obs_dim, "critic", mode, s_critic, cfg.pidm, warch, pidm=pidm)
    policy = GaussianPolicy(actor, init_log_std=cfg.ppo.init_log_std)

    def save(it, pol, crit):
        save_net(pol.net, ckpt_dir / f"actor_{it:05d}.ckpt", pol.log_std, {"iteration": it})
        save_net(crit, ckpt_dir / f"critic_{it:05d}.ckpt", None, {"iteration": it})

    t0 = time.perf_counter()
    res = train(env, policy, critic, cfg.ppo, s_train, checkpoint_fn=save, record_early=record_early,
                progress=_progress(f"train {task_spec.name}/{mode}/{seed}", every=10))
    write_csv(out / "curves.csv", res.curves)
    write_csv(out / "weight_updates.csv", res.weight_updates, ["iteration", "network", "submodule", "value"])
    if record_early:
        buf = TransitionBuffer()
        for step in res.early_transitions:
            buf.append(step.clean_x, step.action, step.clean_next_x, step.done, step.episode_id,
                       np.arange(step.action.shape[0]))
        write_dataset(out / "early_data.bin", buf.records(), cfg.arm, cfg.pidm.k_hist, source="rl-early",
                      extra={"seed": seed, "task": task_spec.name, "iterations": record_early})
    summary = {"kind": "train", "task": task_spec.name, "method": method or mode, "init": mode,
               "seed": seed, "status": res.status, "message": res.message,
               "iterations": len(res.curves), "pidm_checkpoint": str(pidm_path or "")}
    _write_json(out / "run.json", summary)
    summary["seconds"] = time.perf_counter() - t0
    summary["curves"] = res.curves
    return summary


# ------------------------------------------------------------------- probing

_CKPT = re.compile(r"actor_(\d+)\.ckpt$")


def list_actor_checkpoints(ckpt_dir) -> list[tuple[int, Path]]:
    found = []
    for p in Path(ckpt_dir).iterdir():
        m = _CKPT.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def run_probe(cfg: RunConfig, ckpt_dir, out_csv, task: str | None = None) -> dict:
    ckpt_dir = Path(ckpt_dir)
    if task is None:
        meta = ckpt_dir.parent / "run.json"
        task = json.loads(meta.read_text())["task"] if meta.exists() else cfg.task.name
    found = list_actor_checkpoints(ckpt_dir)
    if len(found) < 2:
        raise ConfigurationError(f"{ckpt_dir}: need at least two actor checkpoints, found {len(found)}")
    entries = []
    for it, path in found:
        net, manifest = load_net(path, cfg.pidm)
        entries.append((f"iter_{it}", net, manifest["extra"].get("log_std")))
    out_csv = Path(out_csv)
    if out_csv.exists():
        raise ConfigurationError(f"{out_csv} already exists")
    grid = probe_matrix(entries, _task(cfg, task), cfg.probe, data_seed=cfg.seed, probe_seed=cfg.seed,
                        progress=_progress("probe"))
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text(grid.to_csv())
    return {"kind": "probe", "task": task, "checkpoints": grid.checkpoints, "layers": grid.layers,
            "errors": grid.errors.tolist(), "zero_order": grid.zero_order.tolist()}


# ----------------------------------------------------------------- reporting

def run_report(cfg: RunConfig, runs_dir, out=None) -> dict:
    dirs = metrics.find_runs(runs_dir)
    if not dirs:
        raise metrics.ReportError(f"no run.json found under {runs_dir}")
    train_dirs = []
    for d in dirs:
        meta = json.loads((d / "run.json").read_text())
        if meta.get("kind", "train") == "train":
            train_dirs.append(d)
    out = fresh_dir(out or Path(runs_dir) / "report")
    return metrics.build_report(train_dirs, out, cfg.metrics.tail, cfg.metrics.smoothing)


# --------------------------------------------------------------------- bench

def run_bench(cfg: RunConfig, out) -> dict:
    """Exploration, pretraining, the task x method x seed matrix and the report.

    The returned summary carries per-phase wall times under ``seconds``; they
    are never written to disk.
    """
    out = fresh_dir(out)
    (out / "config.json").write_text(cfg.to_json())
    methods = [normalize_mode(m) for m in cfg.bench.methods]
    seconds = {}
    pidm_path = None
    if any(m in PIDM_MODES for m in methods):
        ex = run_explore(cfg, out / "explore")
        if ex["status"] != "ok":
            raise RuntimeError(f"exploration failed: {ex['message']}")
        pt = run_pretrain(cfg, out / "explore" / "dataset.bin", out / "pretrain")
        if pt["status"] != "ok":
            raise RuntimeError(f"pretraining failed: {pt['message']}")
        seconds.update(explore=ex["seconds"], pretrain=pt["seconds"])
        pidm_path = out / "pretrain" / "pidm.ckpt"
    t0 = time.perf_counter()
    for task in cfg.bench.tasks:
        for method in methods:
            for seed in cfg.bench.seeds:
                run_train(cfg, out / "runs" / task / method / f"seed_{seed}", task=task, init=method,
                          pidm_path=pidm_path if method in PIDM_MODES else None, seed=int(seed))
    seconds["matrix"] = time.perf_counter() - t0
    summary = run_report(cfg, out / "runs", out / "report")
    summary["seconds"] = seconds
    return summary


def _progress(tag: str, every: int = 1):
    def cb(i, *payload):
        if not isinstance(i, int) or i % every == 0:
            first = payload[0] if payload else ""
            if isinstance(first, dict):
                first = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in first.items())
            log.info("[%s] %s %s", tag, i, first)
    return cb
