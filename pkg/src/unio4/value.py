"""Expectile value fitting: V toward a tau-expectile of target-Q, Q toward r + gamma V(s')."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Dataset, NormStats
from .errors import ConfigError
from .nn import Adam, Mlp, decay_schedule

VALUE_MAGIC = b"UO4V"


def expectile_loss(u, tau: float):
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


def expectile_grad(u, tau: float):
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * np.abs(tau - (u < 0)) * u


@dataclass
class ValueHeads:
    q_net: Mlp
    v_net: Mlp
    target_q: Mlp
    obs_mean: np.ndarray
    obs_std: np.ndarray
    tau: float = 0.7
    polyak_rate: float = 0.005
    gamma: float = 0.99
    lr: float = 3e-4
    q_opt: Adam = field(default=None, repr=False)
    v_opt: Adam = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.5 <= self.tau < 1.0:
            raise ConfigError(f"tau must lie in [0.5, 1), got {self.tau}")
        if not 0.0 < self.polyak_rate <= 1.0:
            raise ConfigError(f"polyak_rate must lie in (0, 1], got {self.polyak_rate}")
        self.q_opt = self.q_opt or Adam(lr=self.lr)
        self.v_opt = self.v_opt or Adam(lr=self.lr)

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, stats: NormStats | None = None,
               q_hidden=(128, 128), v_hidden=(64, 64), **kw) -> "ValueHeads":
        stats = stats or NormStats.identity(obs_dim)
        q = Mlp.create([obs_dim + act_dim, *q_hidden, 1], rng, "relu", "identity")
        v = Mlp.create([obs_dim, *v_hidden, 1], rng, "tanh", "identity")
        return cls(q, v, q.copy(), np.array(stats.mean, float), np.array(stats.std, float), **kw)

    def normalize(self, obs) -> np.ndarray:
        return (np.atleast_2d(np.asarray(obs, dtype=np.float64)) - self.obs_mean) / self.obs_std

    def q_input(self, obs, act) -> np.ndarray:
        return np.concatenate([self.normalize(obs), np.atleast_2d(np.asarray(act, dtype=np.float64))], axis=1)

    def q(self, obs, act, target: bool = False) -> np.ndarray:
        net = self.target_q if target else self.q_net
        return net.forward(self.q_input(obs, act))[:, 0]

    def v(self, obs) -> np.ndarray:
        return self.v_net.forward(self.normalize(obs))[:, 0]


def v_loss_and_grad(heads: ValueHeads, obs, act):
    """Mean expectile loss of (target_q(s, a) - V(s)); gradient w.r.t. v_net only."""
    q_t = heads.q(obs, act, target=True)
    v, cache = heads.v_net.forward_cache(heads.normalize(obs))
    u = q_t - v[:, 0]
    loss = float(expectile_loss(u, heads.tau).mean())
    grads, _ = heads.v_net.backward(cache, (-expectile_grad(u, heads.tau) / len(u))[:, None])
    return loss, grads


def q_loss_and_grad(heads: ValueHeads, obs, act, reward, next_obs, terminal):
    target = np.asarray(reward, float) + heads.gamma * (1.0 - np.asarray(terminal, float)) * heads.v(next_obs)
    q, cache = heads.q_net.forward_cache(heads.q_input(obs, act))
    resid = target - q[:, 0]
    loss = float((resid**2).mean())
    grads, _ = heads.q_net.backward(cache, (-2.0 * resid / len(resid))[:, None])
    return loss, grads


def fit_v_step(heads: ValueHeads, obs, act) -> float:
    loss, grads = v_loss_and_grad(heads, obs, act)
    heads.v_opt.step(heads.v_net.params(), grads)
    return loss


def fit_q_step(heads: ValueHeads, obs, act, reward, next_obs, terminal) -> float:
    loss, grads = q_loss_and_grad(heads, obs, act, reward, next_obs, terminal)
    heads.q_opt.step(heads.q_net.params(), grads)
    return loss


def polyak_update(heads: ValueHeads) -> None:
    rho = heads.polyak_rate
    for t, p in zip(heads.target_q.params(), heads.q_net.params()):
        t *= 1.0 - rho
        t += rho * p


def advantage(heads: ValueHeads, obs, act) -> np.ndarray:
    return heads.q(obs, act) - heads.v(obs)


@dataclass
class ValueConfig:
    tau: float = 0.7
    steps: int = 20000
    batch_size: int = 256
    lr: float = 3e-4
    polyak_rate: float = 0.005
    q_hidden: tuple = (128, 128)
    v_hidden: tuple = (64, 64)
    lr_decay: bool = False


def fit_values(heads: ValueHeads, dataset: Dataset, steps: int, batch_size: int,
               rng: np.random.Generator, log=None, lr_decay: bool = False) -> tuple[list[float], list[float]]:
    """Alternate one V step and one Q step per iteration, Polyak-averaging the target.

    With ``lr_decay`` both learning rates anneal linearly to zero, which damps
    the minibatch jitter that otherwise keeps V a few percent off its fixed point.
    """
    obs = dataset.obs.astype(np.float64)
    act = dataset.act.astype(np.float64)
    rew = dataset.reward.astype(np.float64)
    nxt = dataset.next_obs.astype(np.float64)
    term = dataset.terminal.astype(np.float64)
    n = len(obs)
    v_hist, q_hist = [], []
    for step in range(steps):
        if lr_decay:
            heads.q_opt.lr = heads.v_opt.lr = decay_schedule(heads.lr, step / steps)
        idx = rng.integers(0, n, size=min(batch_size, n))
        v_hist.append(fit_v_step(heads, obs[idx], act[idx]))
        q_hist.append(fit_q_step(heads, obs[idx], act[idx], rew[idx], nxt[idx], term[idx]))
        polyak_update(heads)
        if log is not None and (step + 1) % 1000 == 0:
            log(step + 1, {"v_loss": v_hist[-1], "q_loss": q_hist[-1]})
    return v_hist, q_hist


def save_values(heads: ValueHeads, path: str | Path) -> None:
    blob = checkpoint.pack(VALUE_MAGIC, [heads.q_net, heads.v_net, heads.target_q],
                           [heads.obs_mean, heads.obs_std], [heads.tau, heads.polyak_rate, heads.gamma])
    checkpoint.write(path, blob)


def load_values(path: str | Path) -> ValueHeads:
    (q, v, t), (mean, std), (tau, rho, gamma) = checkpoint.unpack(checkpoint.read(path), VALUE_MAGIC)
    return ValueHeads(q, v, t, mean, std, tau=float(tau), polyak_rate=float(rho), gamma=float(gamma))
