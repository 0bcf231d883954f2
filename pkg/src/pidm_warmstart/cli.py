"""Command-line entry point: explore, pretrain, train, probe, report, bench.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .data import DatasetFormatError
from .metrics import ReportError
from .nn_core import CheckpointIncompatibleError, ConfigurationError, TrainingDivergenceError
from .warmstart import INIT_MODES

log = logging.getLogger("pidm_warmstart")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _load(args) -> config_mod.RunConfig:
    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.default(seed=0)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, cfg, name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(cfg.output_dir) if cfg.output_dir else pipeline.output_root()
    return root / name


def cmd_explore(args):
    cfg = _load(args)
    res = pipeline.run_explore(cfg, _out(args, cfg, f"explore_seed{cfg.seed}"))
    print(f"explore: {res['windows']} windows from {res['transitions']} transitions "
          f"({res['seconds']:.0f} s), status {res['status']}")
    return EXIT_OK if res["status"] == "ok" else EXIT_RUNTIME


def cmd_pretrain(args):
    cfg = _load(args)
    res = pipeline.run_pretrain(cfg, args.data, _out(args, cfg, f"pretrain_seed{cfg.seed}"), args.data_source)
    print(f"pretrain: best epoch {res['best_epoch']}, val L1 {res['best_val_loss']}, status {res['status']}")
    for row in res["eval"]:
        print(f"  |a-q| in [{row['bin_lo']}, {row['bin_hi']}): n={row['count']:6d} "
              f"normalized error {row['normalized_error']:.3f}")
    return EXIT_OK if res["status"] == "ok" else EXIT_RUNTIME


def cmd_train(args):
    cfg = _load(args)
    task = args.task or cfg.task.name
    init = args.init or cfg.warmstart.init
    name = f"train_{task}_{init.replace('-', '_')}_seed{cfg.seed}"
    res = pipeline.run_train(cfg, _out(args, cfg, name), task=task, init=init, pidm_path=args.pidm,
                             seed=cfg.seed, record_early=args.record_early, method=args.method)
    last = res["curves"][-1]["mean_reward"] if res["curves"] else float("nan")
    print(f"train: {res['iterations']} iterations, final mean reward {last:.4f}, status {res['status']}")
    return EXIT_OK if res["status"] == "ok" else EXIT_RUNTIME


def cmd_probe(args):
    cfg = _load(args)
    res = pipeline.run_probe(cfg, args.checkpoints, args.out, args.task)
    print(f"probe: {len(res['checkpoints'])} checkpoints x {len(res['layers'])} layers -> {args.out}")
    return EXIT_OK


def cmd_report(args):
    cfg = _load(args)
    summary = pipeline.run_report(cfg, args.runs, args.out)
    print(json.dumps(summary["tasks"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args):
    cfg = _load(args)
    summary = pipeline.run_bench(cfg, _out(args, cfg, f"bench_seed{cfg.seed}"))
    print(json.dumps(summary["tasks"], indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pidm-warmstart", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration (defaults if omitted)")
        sp.add_argument("--out", help="output directory (must not exist or be empty)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("explore", help="collect an exploration dataset")
    common(sp)
    sp.set_defaults(func=cmd_explore)

    sp = sub.add_parser("pretrain", help="pretrain a PIDM on a dataset")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset.bin from explore or train --record-early")
    sp.add_argument("--data-source", default="exploration", choices=("exploration", "rl-early"))
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train a PPO policy")
    common(sp)
    sp.add_argument("--task", choices=("reach", "track", "posture"))
    sp.add_argument("--init", choices=INIT_MODES + tuple(m.replace("_", "-") for m in INIT_MODES))
    sp.add_argument("--pidm", help="PIDM checkpoint for pretrained init modes")
    sp.add_argument("--record-early", type=int, default=0, metavar="N",
                    help="dump noise-free transitions of the first N iterations")
    sp.add_argument("--method", help="method tag for reports (default: the init mode)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("probe", help="probe a run's actor checkpoints")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoints", required=True, help="checkpoints/ directory of a train run")
    sp.add_argument("--out", required=True, help="grid CSV path")
    sp.add_argument("--task", choices=("reach", "track", "posture"))
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("report", help="aggregate train runs into CSV tables")
    sp.add_argument("--config")
    sp.add_argument("--runs", required=True, help="directory searched recursively for run.json")
    sp.add_argument("--out", help="report directory (default: <runs>/report)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("bench", help="explore, pretrain, train the full matrix and report")
    common(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, DatasetFormatError, CheckpointIncompatibleError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReportError, TrainingDivergenceError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
