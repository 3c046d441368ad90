"""AM-Q offline policy evaluation: roll a dynamics model for H steps and sum Q along the way."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .data import Dataset, initial_states
from .dynamics import GaussianDynamics, predict_next
from .envs import TabularMdp, exact_amq
from .errors import ConfigError


@dataclass
class OPEConfig:
    horizon: int = 20
    n_rollouts: int = 512
    start_state_source: str = "dataset_initials"
    rollout_mode: str = "mean"
    margin: float = 0.0

    def __post_init__(self):
        if self.horizon < 1 or self.n_rollouts < 1:
            raise ConfigError("OPE horizon and n_rollouts must be >= 1")
        if self.start_state_source not in ("dataset_initials", "dataset_uniform"):
            raise ConfigError(f"unknown start_state_source {self.start_state_source!r}")
        if self.rollout_mode not in ("mean", "sample"):
            raise ConfigError(f"unknown rollout_mode {self.rollout_mode!r}")


@dataclass
class OPEReport:
    policy_id: int
    j_hat: float
    std_err: float
    n_rollouts: int
    horizon: int
    seed: int | None = None
    n_evaluations: int = 0

    def to_dict(self) -> dict:
        return {"policy_id": self.policy_id, "j_hat": self.j_hat, "std_err": self.std_err,
                "N": self.n_rollouts, "H": self.horizon, "seed": self.seed}


class TabularTransition:
    """True tabular dynamics acting on one-hot states and argmax-decoded actions."""

    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp

    def predict_next(self, states, actions, mode, rng):
        s = np.argmax(states, axis=1)
        a = np.argmax(actions, axis=1)
        cdf = np.cumsum(self.mdp.transition[s, a], axis=1)
        nxt = (rng.random(len(s))[:, None] > cdf).sum(axis=1)
        nxt = np.minimum(nxt, self.mdp.n_states - 1)
        return np.eye(self.mdp.n_states)[nxt]


class TabularQ:
    def __init__(self, q: np.ndarray):
        self.table = np.asarray(q, dtype=np.float64)

    def q(self, obs, act):
        return self.table[np.argmax(np.atleast_2d(obs), axis=1), np.argmax(np.atleast_2d(act), axis=1)]


class TabularPolicy:
    """Stochastic tabular policy emitting +1/-1 action vectors."""

    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs, dtype=np.float64)

    def sample(self, obs, rng, deterministic=False):
        s = np.argmax(np.atleast_2d(obs), axis=1)
        if deterministic:
            a = self.probs[s].argmax(axis=1)
        else:
            cdf = np.cumsum(self.probs[s], axis=1)
            a = np.minimum((rng.random(len(s))[:, None] > cdf).sum(axis=1), self.probs.shape[1] - 1)
        out = -np.ones((len(s), self.probs.shape[1]))
        out[np.arange(len(s)), a] = 1.0
        return out


def start_state_pool(dataset: Dataset, cfg: OPEConfig) -> np.ndarray:
    if cfg.start_state_source == "dataset_initials":
        return initial_states(dataset)
    return dataset.obs.astype(np.float64)


def amq_estimate(policy, dynamics, value_heads, dataset: Dataset | np.ndarray, cfg: OPEConfig,
                 rng: np.random.Generator, policy_id: int = 0, project=None, seed: int | None = None) -> OPEReport:
    """Mean over N model rollouts of sum_{t<H} Q(s_t, a_t); H action draws, H - 1 transitions.

    ``dataset`` may also be an explicit array of start states. ``project`` maps
    predicted states back onto the valid observation set (gridworld one-hots).
    """
    pool = dataset if isinstance(dataset, np.ndarray) else start_state_pool(dataset, cfg)
    if len(pool) == 0:
        raise ConfigError("empty start-state pool for AM-Q")
    states = pool[rng.integers(0, len(pool), size=cfg.n_rollouts)]
    returns = np.zeros(cfg.n_rollouts)
    evals = 0
    for t in range(cfg.horizon):
        actions = policy.sample(states, rng)
        returns += value_heads.q(states, actions)
        evals += len(states)
        if t + 1 < cfg.horizon:
            if isinstance(dynamics, GaussianDynamics):
                states = predict_next(dynamics, states, actions, cfg.rollout_mode, rng)
            else:
                states = dynamics.predict_next(states, actions, cfg.rollout_mode, rng)
            if project is not None:
                states = project(states)
    n = cfg.n_rollouts
    std_err = float(returns.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return OPEReport(policy_id, float(returns.mean()), std_err, n, cfg.horizon, seed, evals)


def accept_replacement(report_new: OPEReport, report_old: OPEReport, margin: float = 0.0) -> bool:
    if (report_new.n_rollouts, report_new.horizon, report_new.seed) != (
            report_old.n_rollouts, report_old.horizon, report_old.seed):
        raise ConfigError("OPE reports were computed under different configurations")
    return report_new.j_hat - report_old.j_hat > margin


def select_top_k(reports: Sequence[OPEReport], k: int) -> list[int]:
    if not 1 <= k <= len(reports):
        raise ConfigError(f"k={k} out of range for {len(reports)} reports")
    ranked = sorted(reports, key=lambda r: (-r.j_hat, r.policy_id))
    return [r.policy_id for r in ranked[:k]]


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    q_max: float
    kl: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    if (q[mask] <= 0).any():
        return float("inf")
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def thm2_bound_check(mdp: TabularMdp, perturbed: TabularMdp, policy: np.ndarray, q_max: float,
                     horizon: int, q: np.ndarray | None = None) -> BoundCheck:
    """Check |J(pi, T) - J(pi, T_hat)| <= q_max * H(H-1)/2 * sqrt(2 KL).

    The KL is taken between the joint (s, a, s') laws rho * pi * T and
    rho * pi * T_hat, with rho the initial state distribution.
    """
    if perturbed.transition.shape != mdp.transition.shape:
        raise ConfigError("perturbed MDP must share state and action spaces")
    if q is None:
        from .envs import dp_optimal_q
        q = dp_optimal_q(mdp)
    q = np.clip(q, -q_max, q_max)
    lhs = abs(exact_amq(mdp, policy, q, horizon) - exact_amq(perturbed, policy, q, horizon))
    w = mdp.initial_dist[:, None] * np.asarray(policy, dtype=np.float64)
    kl = _kl((w[:, :, None] * mdp.transition).ravel(), (w[:, :, None] * perturbed.transition).ravel())
    rhs = q_max * horizon * (horizon - 1) / 2.0 * np.sqrt(2.0 * kl) if np.isfinite(kl) else float("inf")
    return BoundCheck(float(lhs), float(rhs), float(q_max), float(kl), bool(lhs <= rhs + 1e-9))
