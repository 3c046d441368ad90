"""Run configuration: nested dataclass sections, YAML files, per-environment presets."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .offline import OfflineOptConfig
from .online import OnlineConfig
from .ope import OPEConfig
from .policy import BCConfig
from .value import ValueConfig


@dataclass
class CollectConfig:
    n_transitions: int = 20_000
    # [kind, weight] pairs; kind "pretrained" samples from the pretraining checkpoint
    mixture: list = field(default_factory=lambda: [["pointmass-upper-mode", 0.5], ["pointmass-lower-mode", 0.5]])


@dataclass
class DynamicsConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (128, 128)
    nll_beta: float = 1.0


@dataclass
class FinalizeConfig:
    k: int = 1
    eval_episodes: int = 10
    skip_offline: bool = False


@dataclass
class OnlineSection(OnlineConfig):
    critic_hidden: tuple = (64, 64)
    eval_seed_name: str = "eval"


@dataclass
class PretrainConfig:
    env: str = "pointmass2d"
    total_env_steps: int = 100_000
    # enables the offline-stage disagreement term when offline starts from a pretrained policy
    alpha_offline: float = 0.1


@dataclass
class SweepConfig:
    axis: str = "alpha"
    values: list = field(default_factory=lambda: [0.0, 0.1, 1.0])


@dataclass
class OpeAccuracyConfig:
    # BC step counts for the pool; 0 means the random initialization
    bc_checkpoints: list = field(default_factory=lambda: [0, 25, 100, 400])
    include_offline: bool = True
    n_episodes: int = 20
    tie_tolerance: float = 1e-9


@dataclass
class RunConfig:
    env: str = "pointmass2d"
    env_kwargs: dict = field(default_factory=dict)
    seed: int = 0
    collect: CollectConfig = field(default_factory=CollectConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    value: ValueConfig = field(default_factory=ValueConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    ope: OPEConfig = field(default_factory=OPEConfig)
    offline: OfflineOptConfig = field(default_factory=OfflineOptConfig)
    finalize: FinalizeConfig = field(default_factory=FinalizeConfig)
    online: OnlineSection = field(default_factory=OnlineSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ope_accuracy: OpeAccuracyConfig = field(default_factory=OpeAccuracyConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def section_hash(self, *sections: str) -> str:
        """Hash of the seed, env and the named sections; stage outputs are keyed by it."""
        d = self.to_dict()
        payload = {"seed": self.seed, "env": self.env, "env_kwargs": d["env_kwargs"],
                   **{s: d[s] for s in sections}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# Desk-scale presets. Keys absent here take the dataclass defaults.
PRESETS: dict[str, dict] = {
    "pointmass2d": {
        "env": "pointmass2d",
        "collect": {"n_transitions": 10_000,
                    "mixture": [["pointmass-upper-mode", 0.5], ["pointmass-lower-mode", 0.5]]},
        "bc": {"n_members": 4, "alpha": 0.1, "steps": 2000, "batch_size": 256, "lr": 1e-3, "hidden": [64, 64]},
        "value": {"tau": 0.7, "steps": 4000, "batch_size": 256, "lr": 3e-4, "lr_decay": True},
        "dynamics": {"steps": 3000, "batch_size": 256, "lr": 1e-3},
        "ope": {"horizon": 20, "n_rollouts": 256},
        "offline": {"clip_epsilon": 0.25, "gate_interval": 50, "total_steps": 500, "minibatch_size": 256,
                    "lr": 1e-4},
        "online": {"rollout_horizon": 2048, "total_env_steps": 300_000, "eval_interval": 10_240, "lr": 3e-4},
    },
    "pointmass2d-shifted": {
        "env": "pointmass2d-shifted",
        "pretrain": {"env": "pointmass2d", "total_env_steps": 60_000, "alpha_offline": 0.1},
        "collect": {"n_transitions": 10_000, "mixture": [["pretrained", 1.0]]},
        "bc": {"n_members": 4, "alpha": 0.1, "steps": 2000},
        "value": {"tau": 0.7, "steps": 4000, "lr_decay": True},
        "dynamics": {"steps": 3000},
        "ope": {"horizon": 20, "n_rollouts": 256},
        "offline": {"gate_interval": 50, "total_steps": 500, "lr": 1e-4},
        "online": {"rollout_horizon": 2048, "total_env_steps": 60_000, "eval_interval": 10_240, "lr": 3e-4},
    },
    "pendulum-lite": {
        "env": "pendulum-lite",
        "collect": {"n_transitions": 20_000, "mixture": [["pendulum-energy-pump", 0.7], ["pendulum-random", 0.3]]},
        "bc": {"n_members": 4, "alpha": 0.1, "steps": 3000},
        "value": {"tau": 0.7, "steps": 6000, "lr_decay": True},
        "dynamics": {"steps": 4000},
        "ope": {"horizon": 20, "n_rollouts": 256},
        "offline": {"gate_interval": 50, "total_steps": 500, "lr": 1e-4},
        "online": {"rollout_horizon": 2048, "total_env_steps": 300_000, "eval_interval": 10_240, "lr": 3e-4},
    },
    "gridworld5": {
        "env": "gridworld5",
        # gamma 0.99 leaves ~1% Q* action gaps over a 30-step horizon, below value-fit noise
        "env_kwargs": {"gamma": 0.95},
        "collect": {"n_transitions": 6000,
                    "mixture": [["gridworld-epsilon-greedy(0.3, target=20)", 0.7],
                                ["gridworld-epsilon-greedy(0.3)", 0.3]]},
        "bc": {"n_members": 4, "alpha": 0.1, "steps": 1500, "hidden": [64, 64]},
        "value": {"tau": 0.9, "steps": 6000, "lr": 1e-3, "lr_decay": True},
        "dynamics": {"steps": 3000},
        "ope": {"horizon": 15, "n_rollouts": 256},
        "offline": {"gate_interval": 10, "total_steps": 40, "lr": 3e-4},
        "online": {"rollout_horizon": 1024, "total_env_steps": 50_000, "eval_interval": 5120},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = getattr(cls(), name) if _has_default(fields[name]) else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _has_default(f: dataclasses.Field) -> bool:
    return f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING


def from_dict(data: dict) -> RunConfig:
    """Resolve an optional ``preset`` key, then overlay the remaining keys."""
    data = dict(data or {})
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        data = deep_merge(PRESETS[preset], data)
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({"preset": "pointmass2d"})
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    return from_dict(data or {})


def with_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Copy of ``cfg`` with one dotted key replaced, e.g. ``"bc.alpha"``."""
    data = cfg.to_dict()
    node = data
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    if leaf not in node:
        raise ConfigError(f"no config key {dotted!r}")
    node[leaf] = value
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
