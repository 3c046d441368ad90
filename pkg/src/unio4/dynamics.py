"""Gaussian transition model over next-state deltas, fit by maximum likelihood."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Dataset, NormStats
from .errors import NumericError
from .nn import Adam, Mlp

DYNAMICS_MAGIC = b"UO4T"
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def gaussian_nll(mean: np.ndarray, log_std: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row negative log-likelihood of ``target`` under a diagonal Gaussian."""
    z = (target - mean) * np.exp(-log_std)
    return (0.5 * z * z + log_std + _HALF_LOG_2PI).sum(axis=-1)


@dataclass
class GaussianDynamics:
    """Predicts ``s' - s``; log-std is squashed into ``[log_std_min, log_std_max]`` with a sigmoid."""

    net: Mlp
    obs_mean: np.ndarray
    obs_std: np.ndarray
    log_std_min: float = -7.0
    log_std_max: float = 1.0
    lr: float = 1e-3
    opt: Adam = field(default=None, repr=False)

    def __post_init__(self):
        self.opt = self.opt or Adam(lr=self.lr)

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, stats: NormStats | None = None,
               hidden=(128, 128), lr: float = 1e-3) -> "GaussianDynamics":
        stats = stats or NormStats.identity(obs_dim)
        net = Mlp.create([obs_dim + act_dim, *hidden, 2 * obs_dim], rng, "relu", "identity")
        return cls(net, np.array(stats.mean, float), np.array(stats.std, float), lr=lr)

    @property
    def obs_dim(self) -> int:
        return len(self.obs_mean)

    def _input(self, obs, act):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        act = np.atleast_2d(np.asarray(act, dtype=np.float64))
        return np.concatenate([(obs - self.obs_mean) / self.obs_std, act], axis=1)

    def _split(self, out):
        d = self.obs_dim
        sig = 1.0 / (1.0 + np.exp(-out[:, d:]))
        log_std = self.log_std_min + (self.log_std_max - self.log_std_min) * sig
        return out[:, :d], log_std, sig

    def predict(self, obs, act) -> tuple[np.ndarray, np.ndarray]:
        """Delta mean and log-std for each row."""
        mean, log_std, _ = self._split(self.net.forward(self._input(obs, act)))
        return mean, log_std


def nll_loss_and_grad(model: GaussianDynamics, obs, act, next_obs, beta: float = 0.0):
    """Mean NLL and the gradient of its beta-weighted variant.

    With ``beta > 0`` each dimension's term is weighted by a constant
    ``sigma ** (2 beta)`` before differentiation. The fixed point is the same
    but near-deterministic dimensions no longer swamp the shared layers.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    target = np.atleast_2d(np.asarray(next_obs, dtype=np.float64)) - obs
    out, cache = model.net.forward_cache(model._input(obs, act))
    mean, log_std, sig = model._split(out)
    inv_var = np.exp(-2.0 * log_std)
    r = target - mean
    n = len(obs)
    loss = float(gaussian_nll(mean, log_std, target).mean())
    w = np.exp(2.0 * beta * log_std) / n if beta else 1.0 / n
    g_mean = -r * inv_var * w
    g_log_std = (1.0 - r * r * inv_var) * w
    g_raw = g_log_std * (model.log_std_max - model.log_std_min) * sig * (1.0 - sig)
    grads, _ = model.net.backward(cache, np.concatenate([g_mean, g_raw], axis=1))
    return loss, grads


def nll_loss(model: GaussianDynamics, obs, act, next_obs) -> float:
    mean, log_std = model.predict(obs, act)
    target = np.atleast_2d(np.asarray(next_obs, dtype=np.float64)) - np.atleast_2d(obs)
    return float(gaussian_nll(mean, log_std, target).mean())


def train_step(model: GaussianDynamics, obs, act, next_obs, beta: float = 0.0) -> float:
    loss, grads = nll_loss_and_grad(model, obs, act, next_obs, beta)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite dynamics loss {loss}")
    model.opt.step(model.net.params(), grads)
    return loss


def train_dynamics(model: GaussianDynamics, dataset: Dataset, steps: int, batch_size: int,
                   rng: np.random.Generator, log=None, beta: float = 0.0) -> list[float]:
    obs = dataset.obs.astype(np.float64)
    act = dataset.act.astype(np.float64)
    nxt = dataset.next_obs.astype(np.float64)
    n = len(obs)
    hist = []
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        hist.append(train_step(model, obs[idx], act[idx], nxt[idx], beta))
        if log is not None and (step + 1) % 1000 == 0:
            log(step + 1, {"dynamics_nll": hist[-1]})
    return hist


def predict_next(model: GaussianDynamics, obs, act, mode: str = "mean",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    mean, log_std = model.predict(obs2, act)
    if mode == "mean":
        delta = mean
    elif mode == "sample":
        delta = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    else:
        raise ValueError(f"unknown rollout mode {mode!r}")
    out = obs2 + delta
    return out[0] if np.ndim(obs) == 1 else out


def save_dynamics(model: GaussianDynamics, path: str | Path) -> None:
    blob = checkpoint.pack(DYNAMICS_MAGIC, [model.net], [model.obs_mean, model.obs_std],
                           [model.log_std_min, model.log_std_max])
    checkpoint.write(path, blob)


def load_dynamics(path: str | Path) -> GaussianDynamics:
    (net,), (mean, std), (lo, hi) = checkpoint.unpack(checkpoint.read(path), DYNAMICS_MAGIC)
    return GaussianDynamics(net, mean, std, float(lo), float(hi))
