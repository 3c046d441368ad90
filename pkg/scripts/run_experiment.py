#!/usr/bin/env python3
"""Run one multi-seed experiment and print its JSON result.

Examples:
    python scripts/run_experiment.py multistep --preset gridworld5 --seeds 0-4
    python scripts/run_experiment.py finetune --preset pointmass2d --seeds 0-4 --set online.total_env_steps=100000
    python scripts/run_experiment.py diversity --seeds 0,1,2 --out runs/diversity
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import yaml

from unio4 import experiments
from unio4.config import from_dict, with_override

DEFAULT_PRESET = {"diversity": "pointmass2d", "multistep": "gridworld5", "ope-ranking": "pointmass2d",
                  "finetune": "pointmass2d", "ooo": "pointmass2d-shifted"}


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("experiment", choices=sorted(DEFAULT_PRESET))
    ap.add_argument("--preset", default=None)
    ap.add_argument("--seeds", default="0", help="e.g. 0-4 or 0,3,7")
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted override parsed as YAML, repeatable")
    args = ap.parse_args(argv)

    cfg = from_dict({"preset": args.preset or DEFAULT_PRESET[args.experiment]})
    for item in args.set:
        key, _, raw = item.partition("=")
        cfg = with_override(cfg, key, yaml.safe_load(raw))
    seeds = parse_seeds(args.seeds)
    out = args.out or Path("runs") / args.experiment
    start = time.time()
    if args.experiment == "diversity":
        result = experiments.diversity_ablation(cfg, seeds, out)
    elif args.experiment == "multistep":
        result = experiments.multistep_vs_onestep(cfg, seeds, out)
    elif args.experiment == "ope-ranking":
        result = {s: experiments.ope_ranking(cfg, s, out) for s in seeds}
    elif args.experiment == "finetune":
        result = experiments.finetune_comparison(cfg, seeds, out)
    else:
        result = experiments.online_offline_online(cfg, seeds, out)
    result = {"experiment": args.experiment, "seconds": round(time.time() - start, 1), "result": result}
    json.dump(result, sys.stdout, indent=2, default=str)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
