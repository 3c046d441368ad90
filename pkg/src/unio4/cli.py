"""Command-line entry point: ``unio4 <subcommand> --config run.yaml --out runs/x``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, DataError, NumericError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_collect(cfg, args):
    dataset = pipeline.run_collect(cfg, args.out, args.force)
    _print(pipeline.collect_summary(dataset))


def cmd_train_offline(cfg, args):
    summary = pipeline.run_train_offline(cfg, args.out, args.force)
    _print({k: summary[k] for k in ("offline_return", "gate_queries", "accepted", "shortlist")})


def cmd_evaluate_ope(cfg, args):
    _print(pipeline.run_evaluate_ope(cfg, args.out))


def cmd_ope_accuracy(cfg, args):
    report = pipeline.run_ope_accuracy(cfg, args.out)
    _print({k: report[k] for k in ("pairs", "exact_acc", "acc_within_10", "acc_within_20")})


def cmd_finetune_online(cfg, args):
    summary = pipeline.run_finetune_online(cfg, args.out, scratch=args.scratch, force=args.force)
    _print({k: summary[k] for k in ("offline_return", "final_return", "updates")})


def cmd_pretrain_online(cfg, args):
    _print(pipeline.run_pretrain_online(cfg, args.out, args.force))


def cmd_sweep(cfg, args):
    values = None
    if args.values:
        values = [json.loads(v) for v in args.values.split(",")]
    _print(pipeline.run_sweep(cfg, args.out, args.axis, values, args.force))


def cmd_gradcheck(cfg, args):
    from .gradchecks import run_all

    failed = []
    for name, rep in run_all(cfg.seed).items():
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name:22s} max_rel_err={rep.max_relative_error:.3e} checked={rep.n_checked}")
        if not rep.passed:
            failed.append(name)
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")


def cmd_report(cfg, args):
    _print(pipeline.run_report(args.out))


COMMANDS = {
    "collect": cmd_collect,
    "train-offline": cmd_train_offline,
    "evaluate-ope": cmd_evaluate_ope,
    "ope-accuracy": cmd_ope_accuracy,
    "finetune-online": cmd_finetune_online,
    "pretrain-online": cmd_pretrain_online,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unio4", description="Offline-to-online RL with ensemble BC and AM-Q gating")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML run config (may name a preset)")
        p.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
        p.add_argument("--out", type=Path, default=Path("runs/default"))
        p.add_argument("--scratch", action="store_true", help="random init instead of offline checkpoints")
        p.add_argument("--force", action="store_true", help="overwrite artifacts from a different config")
        if name == "sweep":
            p.add_argument("--axis", choices=sorted(pipeline.SWEEP_AXES), default=None)
            p.add_argument("--values", default=None, help="comma-separated values, e.g. 0,0.1,1.0")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
