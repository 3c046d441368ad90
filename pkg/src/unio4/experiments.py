"""Multi-seed experiment drivers shared by ``scripts/`` and the acceptance suite.

Each driver runs whole pipeline stages under ``out/seed<k>/...`` and returns
plain dicts so callers can print, dump or assert on them.
"""
from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, with_override


def _fresh(path: Path) -> Path:
    shutil.rmtree(path, ignore_errors=True)
    path.mkdir(parents=True)
    return path


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    return with_override(cfg, "seed", seed)


def diversity_ablation(cfg: RunConfig, seeds, out: Path, alphas=(0.0, 0.1)) -> dict:
    """Ensemble diversity and offline return per disagreement coefficient."""
    rows = []
    for seed in seeds:
        root = _fresh(Path(out) / f"seed{seed}")
        base = _seeded(cfg, seed)
        pipeline.run_collect(base, root)
        row = {"seed": seed}
        for a in alphas:
            s = pipeline.run_train_offline(with_override(base, "bc.alpha", a), root, out_dir=root / f"alpha={a}")
            row[a] = {"kl": s["bc_mean_pairwise_kl"], "offline_return": s["offline_return"]}
        rows.append(row)
    med = {a: {"kl": float(np.median([r[a]["kl"] for r in rows])),
               "offline_return": float(np.median([r[a]["offline_return"] for r in rows]))} for a in alphas}
    return {"rows": rows, "median": med}


def multistep_vs_onestep(cfg: RunConfig, seeds, out: Path) -> dict:
    """Final return with OPE-gated replacement vs the never-replace (C -> inf) limit."""
    rows = []
    for seed in seeds:
        root = _fresh(Path(out) / f"seed{seed}")
        base = _seeded(cfg, seed)
        pipeline.run_collect(base, root)
        multi = pipeline.run_train_offline(base, root, out_dir=root / "multi")
        one_cfg = with_override(base, "offline.gate_interval", base.offline.total_steps + 1)
        one = pipeline.run_train_offline(one_cfg, root, out_dir=root / "one")
        rows.append({"seed": seed, "multi": multi["offline_return"], "one": one["offline_return"],
                     "accepted": multi["accepted"], "one_gate_queries": one["gate_queries"]})
    return {"rows": rows, "median_multi": float(np.median([r["multi"] for r in rows])),
            "median_one": float(np.median([r["one"] for r in rows]))}


def ope_ranking(cfg: RunConfig, seed: int, out: Path) -> dict:
    """Collect, train offline, then score AM-Q ranking over the checkpoint pool."""
    root = _fresh(Path(out) / f"seed{seed}")
    base = _seeded(cfg, seed)
    pipeline.run_collect(base, root)
    pipeline.run_train_offline(base, root)
    return pipeline.run_ope_accuracy(base, root)


def steps_to_reach(curve, target: float) -> int | None:
    """First env-step count at which the eval curve attains ``target``."""
    for steps, ret in curve:
        if ret >= target:
            return int(steps)
    return None


def no_drop(first: float, offline: float, frac: float = 0.9) -> bool:
    """``first >= frac * offline`` for positive scores; for negative ones allow a ``1 - frac`` relative slack."""
    return first >= offline - (1.0 - frac) * abs(offline)


def finetune_comparison(cfg: RunConfig, seeds, out: Path) -> dict:
    """Warm-started fine-tuning against a scratch run with the same online budget."""
    rows = []
    total = cfg.online.total_env_steps
    for seed in seeds:
        root = _fresh(Path(out) / f"seed{seed}")
        base = _seeded(cfg, seed)
        pipeline.run_collect(base, root)
        pipeline.run_train_offline(base, root)
        warm = pipeline.run_finetune_online(base, root)
        scratch = pipeline.run_finetune_online(base, root, scratch=True)
        reach = steps_to_reach(warm["eval_curve"], scratch["final_return"])
        # the step-0 entry re-evaluates the offline policy; the first online one follows an update
        first = next(r for s, r in warm["eval_curve"] if s >= cfg.online.eval_interval)
        rows.append({"seed": seed, "offline_return": warm["offline_return"], "first_eval": first,
                     "first_gap": (first - warm["offline_return"]) / max(abs(warm["offline_return"]), 1e-12),
                     "warm_final": warm["final_return"], "scratch_final": scratch["final_return"], "steps_to_scratch_final": reach,
                     "reach_fraction": (reach / total) if reach is not None else float("inf")})
    return {"rows": rows, "total_env_steps": total,
            "median_first_eval": float(np.median([r["first_eval"] for r in rows])),
            "median_offline": float(np.median([r["offline_return"] for r in rows])),
            "median_first_gap": float(np.median([r["first_gap"] for r in rows])),
            "median_reach_fraction": float(np.median([r["reach_fraction"] for r in rows])),
            "no_drop_seeds": sum(no_drop(r["first_eval"], r["offline_return"]) for r in rows)}


def online_offline_online(cfg: RunConfig, seeds, out: Path) -> dict:
    """Pretrain in the source simulator, adapt offline on target data, then fine-tune online on the target."""
    rows = []
    for seed in seeds:
        root = _fresh(Path(out) / f"seed{seed}")
        base = _seeded(cfg, seed)
        pre = pipeline.run_pretrain_online(base, root)
        pipeline.run_collect(base, root)
        off = pipeline.run_train_offline(base, root)
        on = pipeline.run_finetune_online(base, root)
        rows.append({"seed": seed, "pretrain": pre["target_env_return"], "offline": off["offline_return"],
                     "online": on["final_return"]})
    return {"rows": rows, **{f"median_{k}": float(np.median([r[k] for r in rows]))
                             for k in ("pretrain", "offline", "online")}}
