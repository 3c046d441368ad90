"""Diagonal-Gaussian policies and ensemble behavior cloning with a disagreement term."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from . import checkpoint
from .data import Dataset, NormStats
from .errors import ConfigError
from .nn import Adam, Mlp

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
POLICY_MAGIC = b"UO4P"


@dataclass
class GaussianPolicy:
    """State-independent log-std; mean is a tanh MLP scaled into the action box.

    Observations are normalized internally with ``obs_mean`` / ``obs_std``.
    """

    mean_net: Mlp
    log_std: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, action_low, action_high, rng: np.random.Generator,
               hidden=(64, 64), log_std_init: float = 0.0, stats: NormStats | None = None) -> "GaussianPolicy":
        net = Mlp.create([obs_dim, *hidden, act_dim], rng, "tanh", "tanh", output_gain=0.01)
        stats = stats or NormStats.identity(obs_dim)
        return cls(net, np.full(act_dim, float(log_std_init)), np.asarray(action_low, float),
                   np.asarray(action_high, float), np.array(stats.mean, float), np.array(stats.std, float))

    @property
    def act_dim(self) -> int:
        return len(self.log_std)

    @property
    def _center(self):
        return 0.5 * (self.action_high + self.action_low)

    @property
    def _half(self):
        return 0.5 * (self.action_high - self.action_low)

    def params(self) -> list[np.ndarray]:
        return self.mean_net.params() + [self.log_std]

    def copy(self) -> "GaussianPolicy":
        return copy.deepcopy(self)

    def load_params_from(self, other: "GaussianPolicy") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def normalize(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def mean(self, obs) -> np.ndarray:
        return self._center + self._half * self.mean_net.forward(self.normalize(obs))

    def log_prob(self, obs, action) -> np.ndarray:
        """Log density of the unsquashed Gaussian at ``action`` (batched over rows)."""
        mu = self.mean(obs)
        z = (np.asarray(action, dtype=np.float64) - mu) * np.exp(-self.log_std)
        return (-0.5 * z * z - self.log_std - _HALF_LOG_2PI).sum(axis=-1)

    def log_prob_grad(self, obs, action, upstream: np.ndarray):
        """Return ``(log_probs, grads)`` where grads are of ``sum(upstream * log_prob)``."""
        obs2 = np.atleast_2d(obs)
        act2 = np.atleast_2d(np.asarray(action, dtype=np.float64))
        y, cache = self.mean_net.forward_cache(self.normalize(obs2))
        mu = self._center + self._half * y
        inv_std = np.exp(-self.log_std)
        z = (act2 - mu) * inv_std
        logp = (-0.5 * z * z - self.log_std - _HALF_LOG_2PI).sum(axis=-1)
        w = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
        net_grads, _ = self.mean_net.backward(cache, w * z * inv_std * self._half)
        g_log_std = (w * (z * z - 1.0)).sum(axis=0)
        return logp, net_grads + [g_log_std]

    def sample(self, obs, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        mu = self.mean(obs)
        if deterministic:
            return np.clip(mu, self.action_low, self.action_high)
        a = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return np.clip(a, self.action_low, self.action_high)

    def act_fn(self, rng: np.random.Generator | None = None, deterministic: bool = True):
        return lambda obs: self.sample(obs, rng, deterministic=deterministic or rng is None)


def save_policy(policy: GaussianPolicy, path: str | Path) -> None:
    blob = checkpoint.pack(POLICY_MAGIC, [policy.mean_net],
                           [policy.log_std, policy.action_low, policy.action_high, policy.obs_mean, policy.obs_std])
    checkpoint.write(path, blob)


def load_policy(path: str | Path) -> GaussianPolicy:
    (net,), (log_std, low, high, mean, std), _ = checkpoint.unpack(checkpoint.read(path), POLICY_MAGIC)
    return GaussianPolicy(net, log_std, low, high, mean, std)


@dataclass
class Ensemble:
    members: list[GaussianPolicy]
    behavior_snapshots: list[GaussianPolicy] = field(default_factory=list)
    iteration_counts: list[int] = field(default_factory=list)
    disagreement_alpha: float = 0.1

    def __post_init__(self):
        if not self.behavior_snapshots:
            self.behavior_snapshots = [m.copy() for m in self.members]
        if not self.iteration_counts:
            self.iteration_counts = [0] * len(self.members)
        if not len(self.members) == len(self.behavior_snapshots) == len(self.iteration_counts):
            raise ConfigError("members, snapshots and iteration counts must have equal length")
        if self.disagreement_alpha < 0:
            raise ConfigError("disagreement_alpha must be non-negative")

    @classmethod
    def create(cls, n: int, obs_dim: int, act_dim: int, action_low, action_high, rng,
               hidden=(64, 64), alpha: float = 0.1, stats: NormStats | None = None) -> "Ensemble":
        members = [GaussianPolicy.create(obs_dim, act_dim, action_low, action_high, rng, hidden, stats=stats)
                   for _ in range(n)]
        return cls(members, disagreement_alpha=alpha)

    def __len__(self) -> int:
        return len(self.members)

    def refresh_snapshots(self) -> None:
        for snap, live in zip(self.behavior_snapshots, self.members):
            snap.load_params_from(live)

    def replace_snapshot(self, i: int) -> None:
        self.behavior_snapshots[i].load_params_from(self.members[i])
        self.iteration_counts[i] += 1


def max_log_density(ensemble: Ensemble, obs, action, live: int | None = None) -> np.ndarray:
    """Max over the snapshot set of log-densities; ``live`` swaps in that live member."""
    pols = list(ensemble.behavior_snapshots)
    if live is not None:
        pols[live] = ensemble.members[live]
    return np.max([p.log_prob(obs, action) for p in pols], axis=0)


def bc_ensemble_loss(ensemble: Ensemble, obs, action, alpha: float | None = None):
    """Per-member ensemble-BC losses and their gradients.

    loss_i = -(1 + alpha) * mean log pi_i + alpha * mean max_j log pi_j, where the
    max runs over the frozen snapshots of the other members and the live member i.
    Gradients flow only into member i.
    """
    alpha = ensemble.disagreement_alpha if alpha is None else alpha
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    n_rows = len(np.atleast_2d(obs))
    others = None
    if alpha > 0:
        others = np.stack([s.log_prob(obs, action) for s in ensemble.behavior_snapshots])
    losses, grads = [], []
    for i, member in enumerate(ensemble.members):
        if alpha > 0:
            logp_i = member.log_prob(obs, action)
            rest = np.delete(others, i, axis=0)
            best_other = rest.max(axis=0) if len(rest) else np.full(n_rows, -np.inf)
            is_max = logp_i >= best_other
            mx = np.where(is_max, logp_i, best_other)
            upstream = (-(1.0 + alpha) + alpha * is_max) / n_rows
            loss = -(1.0 + alpha) * logp_i.mean() + alpha * mx.mean()
        else:
            upstream = np.full(n_rows, -1.0 / n_rows)
            loss = None
        logp, g = member.log_prob_grad(obs, action, upstream)
        if loss is None:
            loss = -logp.mean()
        losses.append(float(loss))
        grads.append(g)
    return losses, grads


@dataclass
class BCConfig:
    n_members: int = 4
    alpha: float = 0.1
    steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    log_std_init: float = 0.0


def train_bc(ensemble: Ensemble, dataset: Dataset, cfg: BCConfig, rng: np.random.Generator,
             log=None) -> list[float]:
    """Joint ensemble BC; snapshots for the max term refresh once per data epoch."""
    obs = dataset.obs.astype(np.float64)
    act = dataset.act.astype(np.float64)
    n = len(obs)
    batch = min(cfg.batch_size, n)
    per_epoch = max(1, n // batch)
    opts = [Adam(lr=cfg.lr) for _ in ensemble.members]
    ensemble.refresh_snapshots()
    losses: list[float] = []
    for step in range(cfg.steps):
        if step > 0 and step % per_epoch == 0:
            ensemble.refresh_snapshots()
        idx = rng.integers(0, n, size=batch)
        member_losses, grads = bc_ensemble_loss(ensemble, obs[idx], act[idx], cfg.alpha)
        for member, opt, g in zip(ensemble.members, opts, grads):
            opt.step(member.params(), g)
            member.clamp()
        losses.append(float(np.mean(member_losses)))
        if log is not None and (step + 1) % 500 == 0:
            log(step + 1, {"bc_loss": losses[-1]})
    ensemble.refresh_snapshots()
    return losses


def kl_pairwise_estimate(ensemble: Ensemble, states, rng: np.random.Generator, m: int = 256) -> np.ndarray:
    """Monte-Carlo symmetric KL between live members, averaged over ``states``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) == 0:
        raise ConfigError("need at least one state")
    n = len(ensemble)
    reps = np.repeat(states, m, axis=0)
    samples, own = [], []
    for p in ensemble.members:
        mu = p.mean(reps)
        a = mu + np.exp(p.log_std) * rng.standard_normal(mu.shape)
        samples.append(a)
        own.append(p.log_prob(reps, a))
    kl = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                kl[i, j] = np.mean(own[i] - ensemble.members[j].log_prob(reps, samples[i]))
    return kl + kl.T


def mean_pairwise_kl(kl: np.ndarray) -> float:
    n = len(kl)
    if n < 2:
        return 0.0
    return float(kl[~np.eye(n, dtype=bool)].mean())


def zbound_check(ensemble: Ensemble, obs, tol: float = 1e-3, use_snapshots: bool = False):
    """Integrate the pointwise-max density over actions; 1 <= Z <= n must hold."""
    pols = ensemble.behavior_snapshots if use_snapshots else ensemble.members
    if pols[0].act_dim != 1:
        raise ConfigError("zbound_check is only supported for 1-d actions")
    obs = np.asarray(obs, dtype=np.float64)
    mus = np.array([float(p.mean(obs)[0]) for p in pols])
    sigmas = np.array([float(np.exp(p.log_std[0])) for p in pols])
    lo, hi = (mus - 12 * sigmas).min(), (mus + 12 * sigmas).max()

    def density(a):
        return np.max(np.exp(-0.5 * ((a - mus) / sigmas) ** 2) / (sigmas * np.sqrt(2 * np.pi)))

    # split at every mean and every pairwise midpoint so quad sees each bump
    pts = np.unique(np.concatenate([mus, 0.5 * (mus[:, None] + mus[None, :]).ravel()]))
    edges = np.unique(np.concatenate([[lo], pts[(pts > lo) & (pts < hi)], [hi]]))
    z = sum(integrate.quad(density, a, b, epsabs=1e-12, epsrel=1e-10, limit=200)[0]
            for a, b in zip(edges[:-1], edges[1:]))
    n = len(pols)
    return float(z), bool(1.0 - tol <= z <= n + tol)
