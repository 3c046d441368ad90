"""On-policy PPO fine-tuning with GAE, value clipping, reward scaling and decay schedules."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import NormStats
from .envs import Env, rollout_return
from .errors import NumericError, ShapeError
from .nn import Adam, Mlp, decay_schedule
from .offline import clipped_surrogate, clipped_surrogate_grad, normalize_advantages
from .policy import GaussianPolicy


@dataclass
class OnlineConfig:
    clip_epsilon: float = 0.1
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollout_horizon: int = 2048
    epochs_per_batch: int = 10
    minibatch_size: int = 64
    lr: float = 3e-5
    value_lr: float | None = None
    value_clip: bool = True
    reward_scaling: bool = True
    lr_and_clip_decay: bool = True
    total_env_steps: int = 100_000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    entropy_coef: float = 0.0
    update_norm_stats: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")


@dataclass
class Critic:
    net: Mlp
    obs_mean: np.ndarray
    obs_std: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, rng: np.random.Generator, hidden=(64, 64), stats: NormStats | None = None):
        stats = stats or NormStats.identity(obs_dim)
        return cls(Mlp.create([obs_dim, *hidden, 1], rng, "tanh", "identity"),
                   np.array(stats.mean, float), np.array(stats.std, float))

    @classmethod
    def from_value_heads(cls, heads) -> "Critic":
        return cls(heads.v_net.copy(), heads.obs_mean.copy(), heads.obs_std.copy())

    def normalize(self, obs):
        return (np.atleast_2d(np.asarray(obs, dtype=np.float64)) - self.obs_mean) / self.obs_std

    def value(self, obs) -> np.ndarray:
        return self.net.forward(self.normalize(obs))[:, 0]


CRITIC_MAGIC = b"UO4C"


def save_critic(critic: Critic, path: str | Path) -> None:
    checkpoint.write(path, checkpoint.pack(CRITIC_MAGIC, [critic.net], [critic.obs_mean, critic.obs_std]))


def load_critic(path: str | Path) -> Critic:
    (net,), (mean, std), _ = checkpoint.unpack(checkpoint.read(path), CRITIC_MAGIC)
    return Critic(net, mean, std)


class RunningMeanStd:
    """Parallel-merge running moments (count, mean, m2)."""

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape((-1,) + self.mean.shape)
        n = len(x)
        if n == 0:
            return
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        delta = mean_b - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + m2_b + delta**2 * self.count * n / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.m2 / self.count) if self.count > 0 else np.zeros_like(self.mean)


class RewardScaler:
    """Divide rewards by the std of a rolling discounted return (mean not subtracted).

    Identity until the std estimate exceeds ``activate_above``.
    """

    def __init__(self, gamma: float, activate_above: float = 1e-4, floor: float = 1e-8):
        self.gamma = gamma
        self.running_return = 0.0
        self.stats = RunningMeanStd()
        self.activate_above = activate_above
        self.floor = floor

    def __call__(self, r: float) -> float:
        self.running_return = self.gamma * self.running_return + r
        self.stats.update(self.running_return)
        std = float(self.stats.std)
        if self.stats.count < 2 or std <= self.activate_above:
            return float(r)
        return float(r / max(std, self.floor))

    def reset(self) -> None:
        self.running_return = 0.0


def scale_reward(state: RewardScaler, r: float) -> float:
    return state(r)


def gae_from_next(rewards, values, next_values, terminals, episode_ends, gamma: float, lam: float):
    """GAE where each row carries its own bootstrap value; recursion stops at episode ends."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    nonterm = 1.0 - np.asarray(terminals, dtype=np.float64)
    cont = 1.0 - np.asarray(episode_ends, dtype=np.float64)
    if not (len(rewards) == len(values) == len(next_values) == len(nonterm) == len(cont)):
        raise ShapeError("GAE inputs have mismatched lengths")
    deltas = rewards + gamma * nonterm * next_values - values
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = deltas[t] + gamma * lam * cont[t] * running
        adv[t] = running
    return adv, adv + values


def gae(rewards, values, terminals, gamma: float, lam: float):
    """Single-trajectory GAE; ``values`` carries one extra bootstrap entry."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(rewards) + 1:
        raise ShapeError(f"values must have length len(rewards) + 1 = {len(rewards) + 1}, got {len(values)}")
    terminals = np.asarray(terminals, dtype=bool)
    return gae_from_next(rewards, values[:-1], values[1:], terminals, terminals, gamma, lam)


def value_loss_and_grad(critic: Critic, obs, v_old, targets, eps: float, clip: bool):
    """max((V - targ)^2, (V_old + clip(V - V_old, -eps, eps) - targ)^2), averaged."""
    v, cache = critic.net.forward_cache(critic.normalize(obs))
    v = v[:, 0]
    err = (v - targets) ** 2
    if clip:
        v_clip = v_old + np.clip(v - v_old, -eps, eps)
        err_clip = (v_clip - targets) ** 2
        use_clip = err_clip > err
        inside = np.abs(v - v_old) < eps
        dv = np.where(use_clip, 2.0 * (v_clip - targets) * inside, 2.0 * (v - targets))
        loss = np.maximum(err, err_clip)
    else:
        dv = 2.0 * (v - targets)
        loss = err
    n = len(v)
    grads, _ = critic.net.backward(cache, (dv / n)[:, None])
    return float(loss.mean()), grads


def policy_loss_and_grad(policy: GaussianPolicy, obs, act, logp_old, adv, eps: float, entropy_coef: float = 0.0):
    logp = policy.log_prob(obs, act)
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - logp_old)
    bad = ~np.isfinite(ratio)
    if bad.any():
        raise NumericError(f"non-finite importance ratio at batch row {int(np.argmax(bad))}")
    n = len(ratio)
    loss = -float(clipped_surrogate(ratio, adv, eps).mean())
    _, grads = policy.log_prob_grad(obs, act, -clipped_surrogate_grad(ratio, adv, eps) * ratio / n)
    if entropy_coef:
        # entropy of a diagonal Gaussian depends only on log_std
        loss -= entropy_coef * float(policy.log_std.sum())
        grads[-1] = grads[-1] - entropy_coef
    clip_frac = float((np.abs(ratio - 1.0) > eps).mean())
    approx_kl = float((logp_old - logp).mean())
    return loss, grads, clip_frac, approx_kl


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    logp_old: np.ndarray
    v_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def ppo_update(policy: GaussianPolicy, critic: Critic, batch: Batch, cfg: OnlineConfig, rng: np.random.Generator,
               pi_opt: Adam, v_opt: Adam, clip_eps: float | None = None) -> dict:
    eps = cfg.clip_epsilon if clip_eps is None else clip_eps
    n = len(batch.obs)
    mb = min(cfg.minibatch_size, n)
    stats = {"policy_loss": [], "value_loss": [], "clip_fraction": [], "kl_estimate": []}
    for _ in range(cfg.epochs_per_batch):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            adv = normalize_advantages(batch.advantages[idx])
            pl, pg, cf, kl = policy_loss_and_grad(policy, batch.obs[idx], batch.act[idx], batch.logp_old[idx],
                                                  adv, eps, cfg.entropy_coef)
            vl, vg = value_loss_and_grad(critic, batch.obs[idx], batch.v_old[idx], batch.returns[idx],
                                         eps, cfg.value_clip)
            pi_opt.step(policy.params(), pg)
            policy.clamp()
            v_opt.step(critic.net.params(), vg)
            for k, v in zip(stats, (pl, vl, cf, kl)):
                stats[k].append(v)
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}


def run_online(policy: GaussianPolicy, critic: Critic, env: Env, cfg: OnlineConfig, rng: np.random.Generator,
               eval_env: Env | None = None, eval_seed: int = 0, obs_norm: str = "frozen", log=None):
    """Collect T steps, compute GAE, update; evaluate deterministically every ``eval_interval`` steps.

    ``obs_norm`` is ``"frozen"`` (warm start: statistics stay those of the
    offline dataset) or ``"running"`` (scratch: statistics follow the data,
    refreshed between batches only).
    """
    # a separate instance so evaluation never interrupts a training episode
    eval_env = eval_env if eval_env is not None else copy.deepcopy(env)
    T = cfg.rollout_horizon
    pi_opt = Adam(lr=cfg.lr)
    v_opt = Adam(lr=cfg.value_lr if cfg.value_lr is not None else cfg.lr)
    scaler = RewardScaler(cfg.gamma)
    if obs_norm not in ("frozen", "running"):
        raise ValueError(f"unknown obs_norm mode {obs_norm!r}")
    if cfg.update_norm_stats:
        obs_norm = "running"
    running = RunningMeanStd(policy.obs_mean.shape) if obs_norm == "running" else None
    metrics: list[dict] = []

    def evaluate():
        return rollout_return(eval_env, policy.act_fn(), np.random.default_rng(eval_seed), cfg.eval_episodes)

    last_eval = evaluate()
    metrics.append({"env_steps": 0, "mean_eval_return": last_eval})
    if log is not None:
        log(0, metrics[-1])
    env_steps = 0
    next_eval = cfg.eval_interval
    obs = env.reset(rng)
    while env_steps + T <= cfg.total_env_steps:
        buf = {k: [] for k in ("obs", "act", "logp", "rew", "next_obs", "term", "end")}
        for _ in range(T):
            a = policy.sample(obs, rng)
            res = env.step(a)
            r = scaler(res.reward) if cfg.reward_scaling else res.reward
            for k, v in zip(buf, (obs, a, policy.log_prob(obs, a), r, res.next_obs, res.terminal,
                                  res.terminal or res.timeout)):
                buf[k].append(v)
            obs = res.next_obs
            if res.terminal or res.timeout:
                scaler.reset()
                obs = env.reset(rng)
        env_steps += T
        b_obs = np.array(buf["obs"])
        b_next = np.array(buf["next_obs"])
        values = critic.value(b_obs)
        adv, rets = gae_from_next(buf["rew"], values, critic.value(b_next), buf["term"], buf["end"],
                                  cfg.gamma, cfg.gae_lambda)
        batch = Batch(b_obs, np.array(buf["act"]), np.array(buf["logp"], dtype=np.float64).reshape(-1),
                      values, adv, rets)
        frac = min(1.0, (env_steps - T) / cfg.total_env_steps)
        clip_eps = cfg.clip_epsilon
        if cfg.lr_and_clip_decay:
            pi_opt.lr = decay_schedule(cfg.lr, frac)
            v_opt.lr = decay_schedule(cfg.value_lr if cfg.value_lr is not None else cfg.lr, frac)
            clip_eps = max(decay_schedule(cfg.clip_epsilon, frac), 1e-8)
        stats = ppo_update(policy, critic, batch, cfg, rng, pi_opt, v_opt, clip_eps)
        if running is not None:
            running.update(b_obs)
            std = np.maximum(running.std, 1e-8)
            for holder in (policy, critic):
                holder.obs_mean = running.mean.copy()
                holder.obs_std = std.copy()
        if env_steps >= next_eval:
            last_eval = evaluate()
            next_eval += cfg.eval_interval
        metrics.append({"env_steps": env_steps, "mean_eval_return": last_eval, **stats})
        if log is not None:
            log(env_steps, metrics[-1])
    return metrics
