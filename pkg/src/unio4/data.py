"""Offline transition datasets: collection, the UO4D binary format, normalization.

Layout of a UO4D v1 file (little-endian)::

    b"UO4D" u32 version
    u64 N, u32 obs_dim, u32 act_dim, u64 payload_nbytes
    f32 obs[N, obs_dim], f32 act[N, act_dim], f32 reward[N], f32 next_obs[N, obs_dim]
    u8 terminal[N], u8 timeout[N]
    u64 n_episodes, u64 episode_starts[n_episodes]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import ActionFn, Env
from .errors import ConfigError, DataError, FormatError

MAGIC = b"UO4D"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIQ")


@dataclass
class Dataset:
    obs: np.ndarray
    act: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    timeout: np.ndarray
    episode_starts: np.ndarray

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.act = np.asarray(self.act, dtype=np.float32)
        self.reward = np.asarray(self.reward, dtype=np.float32).reshape(-1)
        self.next_obs = np.asarray(self.next_obs, dtype=np.float32)
        self.terminal = np.asarray(self.terminal, dtype=bool).reshape(-1)
        self.timeout = np.asarray(self.timeout, dtype=bool).reshape(-1)
        self.episode_starts = np.asarray(self.episode_starts, dtype=np.int64).reshape(-1)
        n = len(self.obs)
        if not all(len(x) == n for x in (self.act, self.reward, self.next_obs, self.terminal, self.timeout)):
            raise DataError("dataset arrays have different lengths")
        if n > 0:
            starts = self.episode_starts
            if len(starts) == 0 or starts[0] != 0 or (np.diff(starts) <= 0).any() or starts[-1] >= n:
                raise DataError("episode_starts must be sorted, start at 0 and index valid rows")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.act.shape[1]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_starts)

    def episode_returns(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0)
        return np.add.reduceat(self.reward.astype(np.float64), self.episode_starts)

    def equals(self, other: "Dataset") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("obs", "act", "reward", "next_obs", "terminal", "timeout", "episode_starts")
        )


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))


def collect(env: Env, policy_mixture: Sequence[tuple[ActionFn, float]], n_transitions: int,
            rng: np.random.Generator) -> Dataset:
    """Roll out whole episodes, each under one mixture component, until at least
    ``n_transitions`` rows are gathered."""
    if n_transitions <= 0:
        raise ConfigError("n_transitions must be positive")
    if not policy_mixture:
        raise ConfigError("empty policy mixture")
    weights = np.array([w for _, w in policy_mixture], dtype=np.float64)
    if (weights <= 0).any():
        raise ConfigError("mixture weights must be positive")
    weights /= weights.sum()
    rows: dict[str, list] = {k: [] for k in ("obs", "act", "reward", "next_obs", "terminal", "timeout")}
    starts = []
    while len(rows["obs"]) < n_transitions:
        act = policy_mixture[rng.choice(len(policy_mixture), p=weights)][0]
        starts.append(len(rows["obs"]))
        obs = env.reset(rng)
        while True:
            a = np.clip(np.asarray(act(obs), dtype=np.float64), env.spec.action_low, env.spec.action_high)
            res = env.step(a)
            for k, v in zip(rows, (obs, a, res.reward, res.next_obs, res.terminal, res.timeout)):
                rows[k].append(v)
            obs = res.next_obs
            if res.terminal or res.timeout:
                break
    return Dataset(
        obs=np.array(rows["obs"]), act=np.array(rows["act"]), reward=np.array(rows["reward"]),
        next_obs=np.array(rows["next_obs"]), terminal=np.array(rows["terminal"]),
        timeout=np.array(rows["timeout"]), episode_starts=np.array(starts),
    )


def save(dataset: Dataset, path: str | Path) -> None:
    payload = b"".join([
        dataset.obs.astype("<f4").tobytes(), dataset.act.astype("<f4").tobytes(),
        dataset.reward.astype("<f4").tobytes(), dataset.next_obs.astype("<f4").tobytes(),
        dataset.terminal.astype(np.uint8).tobytes(), dataset.timeout.astype(np.uint8).tobytes(),
    ])
    n = len(dataset)
    obs_dim = dataset.obs.shape[1] if dataset.obs.ndim == 2 else 0
    act_dim = dataset.act.shape[1] if dataset.act.ndim == 2 else 0
    header = _HEADER.pack(MAGIC, VERSION, n, obs_dim, act_dim, len(payload))
    tail = struct.pack("<Q", len(dataset.episode_starts)) + dataset.episode_starts.astype("<u8").tobytes()
    Path(path).write_bytes(header + payload + tail)


def load(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: file has {len(raw)} bytes, need {_HEADER.size} (offset 0)")
    magic, version, n, obs_dim, act_dim, nbytes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    expected = 4 * n * (2 * obs_dim + act_dim + 1) + 2 * n
    if nbytes != expected:
        raise FormatError(f"payload size field {nbytes} inconsistent with shapes (offset 24)")
    off = _HEADER.size

    def take(count, dtype, shape):
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        if off + size > len(raw):
            raise FormatError(f"truncated payload at offset {off}: need {size} bytes, have {len(raw) - off}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += size
        return arr.copy()

    obs = take(n * obs_dim, "<f4", (n, obs_dim))
    act = take(n * act_dim, "<f4", (n, act_dim))
    reward = take(n, "<f4", (n,))
    next_obs = take(n * obs_dim, "<f4", (n, obs_dim))
    terminal = take(n, "u1", (n,)).astype(bool)
    timeout = take(n, "u1", (n,)).astype(bool)
    (n_eps,) = take(1, "<u8", (1,))
    starts = take(int(n_eps), "<u8", (int(n_eps),)).astype(np.int64)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes at offset {off}")
    return Dataset(obs, act, reward, next_obs, terminal, timeout, starts)


def compute_norm_stats(dataset: Dataset, floor: float = 1e-6) -> NormStats:
    """Population mean/std per feature. Features constant over the dataset get unit std:
    a tiny std would turn any unseen value (an unvisited one-hot cell, say) into a huge input."""
    if len(dataset) < 2:
        raise DataError(f"need at least 2 transitions for normalization statistics, got {len(dataset)}")
    obs = dataset.obs.astype(np.float64)
    std = obs.std(axis=0)
    return NormStats(obs.mean(axis=0), np.where(std < floor, 1.0, std))


def normalize_obs(stats: NormStats, obs: np.ndarray) -> np.ndarray:
    return (np.asarray(obs, dtype=np.float64) - stats.mean) / stats.std


def denormalize_obs(stats: NormStats, obs: np.ndarray) -> np.ndarray:
    return np.asarray(obs, dtype=np.float64) * stats.std + stats.mean


def initial_states(dataset: Dataset) -> np.ndarray:
    if len(dataset) == 0:
        return np.zeros((0, dataset.obs.shape[1] if dataset.obs.ndim == 2 else 0))
    return dataset.obs[dataset.episode_starts].astype(np.float64)
