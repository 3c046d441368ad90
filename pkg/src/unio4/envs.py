"""Desk-scale environments, scripted behavior policies, and exact tabular solvers.

Three registered environments:

* ``pointmass2d`` -- a point in the plane steered toward one of two goals. The
  observed goal is part of the observation; the ``pointmass2d-shifted``
  variant pays reward relative to a goal displaced by a hidden offset.
* ``pendulum-lite`` -- torque-limited pendulum, reward for hanging still.
* ``gridworld5`` -- 5x5 grid, one-hot observations, four moves decoded by
  argmax over a continuous 4-vector, slippery transitions.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

ActionFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    gamma: float

    def __post_init__(self):
        if not np.all(np.asarray(self.action_low) < np.asarray(self.action_high)):
            raise ConfigError("action_low must be strictly below action_high")


@dataclass
class StepResult:
    next_obs: np.ndarray
    reward: float
    terminal: bool
    timeout: bool


class Env:
    name = "env"
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self.rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.rng = rng
        self.t = 0
        return self._reset()

    def step(self, action) -> StepResult:
        a = np.clip(np.asarray(action, dtype=np.float64), self.spec.action_low, self.spec.action_high)
        obs, reward, terminal = self._step(a)
        self.t += 1
        timeout = (not terminal) and self.t >= self.spec.max_episode_steps
        return StepResult(obs, float(reward), bool(terminal), bool(timeout))

    def project_obs(self, obs: np.ndarray) -> np.ndarray:
        """Map a model-predicted observation back onto the valid observation set."""
        return obs

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, a: np.ndarray):
        raise NotImplementedError


class PointMass2D(Env):
    name = "pointmass2d"
    goals = np.array([[0.0, 1.0], [0.0, -1.0]])

    def __init__(self, goal_shift=(0.0, 0.0), max_episode_steps: int = 40, gamma: float = 0.99):
        super().__init__()
        self.goal_shift = np.asarray(goal_shift, dtype=np.float64)
        self.spec = EnvSpec(4, 2, -np.ones(2), np.ones(2), max_episode_steps, gamma)
        self.pos = np.zeros(2)
        self.goal = self.goals[0].copy()

    def _obs(self):
        return np.concatenate([self.pos, self.goal])

    def _reset(self):
        self.pos = self.rng.normal(0.0, 0.05, size=2)
        self.goal = self.goals[self.rng.integers(2)].copy()
        return self._obs()

    def _step(self, a):
        self.pos = self.pos + 0.1 * a
        dist = float(np.linalg.norm(self.pos - (self.goal + self.goal_shift)))
        return self._obs(), -dist, dist < 0.1


class PendulumLite(Env):
    name = "pendulum-lite"
    dt = 0.05

    def __init__(self, max_episode_steps: int = 200, gamma: float = 0.99):
        super().__init__()
        self.spec = EnvSpec(3, 1, np.array([-2.0]), np.array([2.0]), max_episode_steps, gamma)
        self.theta = 0.0
        self.theta_dot = 0.0

    def _obs(self):
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])

    def _reset(self):
        self.theta = self.rng.uniform(-np.pi, np.pi)
        self.theta_dot = self.rng.uniform(-1.0, 1.0)
        return self._obs()

    def _step(self, a):
        u = float(a[0])
        self.theta_dot += self.dt * (-10.0 * np.sin(self.theta) + 2.0 * u)
        self.theta += self.dt * self.theta_dot
        wrapped = (self.theta + np.pi) % (2 * np.pi) - np.pi
        reward = -(wrapped**2 + 0.1 * self.theta_dot**2 + 0.001 * u**2)
        return self._obs(), reward, False


# N, E, S, W as (row, col) offsets
_MOVES = np.array([[-1, 0], [0, 1], [1, 0], [0, -1]])


class GridWorld5(Env):
    name = "gridworld5"
    size = 5

    def __init__(self, start=0, goal=4, slip: float = 0.1, max_episode_steps: int = 30, gamma: float = 0.99):
        super().__init__()
        n = self.size * self.size
        self.start = int(start)
        self.goal = int(goal)
        self.slip = slip
        self.spec = EnvSpec(n, 4, -np.ones(4), np.ones(4), max_episode_steps, gamma)
        self.cell = self.start

    @classmethod
    def move(cls, cell: int, action: int) -> int:
        r, c = divmod(cell, cls.size)
        dr, dc = _MOVES[action]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < cls.size and 0 <= c2 < cls.size:
            return int(r2 * cls.size + c2)
        return cell

    def one_hot(self, cell: int) -> np.ndarray:
        v = np.zeros(self.spec.obs_dim)
        v[cell] = 1.0
        return v

    def _reset(self):
        self.cell = self.start
        return self.one_hot(self.cell)

    def _step(self, a):
        intended = int(np.argmax(a))
        executed = int(self.rng.integers(4)) if self.rng.random() < self.slip else intended
        self.cell = self.move(self.cell, executed)
        at_goal = self.cell == self.goal
        return self.one_hot(self.cell), float(at_goal), at_goal

    def project_obs(self, obs):
        obs = np.asarray(obs)
        out = np.zeros_like(obs)
        idx = np.argmax(obs, axis=-1)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out


_REGISTRY = {
    "pointmass2d": PointMass2D,
    "pointmass2d-shifted": lambda **kw: PointMass2D(goal_shift=kw.pop("goal_shift", (0.4, 0.0)), **kw),
    "pendulum-lite": PendulumLite,
    "gridworld5": GridWorld5,
}


def make_env(name: str, **kwargs) -> Env:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


# ---------------------------------------------------------------- tabular MDPs


@dataclass
class TabularMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # R[s, a]
    initial_dist: np.ndarray
    gamma: float = 0.99

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        s, a, s2 = self.transition.shape
        if s2 != s or self.reward.shape != (s, a) or self.initial_dist.shape != (s,):
            raise ConfigError("inconsistent tabular MDP shapes")
        if np.abs(self.transition.sum(axis=2) - 1.0).max() > 1e-12 or (self.transition < 0).any():
            raise ConfigError("transition rows must be probability vectors")
        if abs(self.initial_dist.sum() - 1.0) > 1e-12:
            raise ConfigError("initial distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def gridworld_mdp(env: GridWorld5, goal: int | None = None) -> TabularMdp:
    """Exact tabular model of ``env``; ``goal`` overrides the rewarded cell."""
    goal = env.goal if goal is None else goal
    n = env.spec.obs_dim
    P = np.zeros((n, 4, n))
    for s in range(n):
        for a in range(4):
            if s == goal:
                P[s, a, s] = 1.0
                continue
            P[s, a, env.move(s, a)] += 1.0 - env.slip
            for b in range(4):
                P[s, a, env.move(s, b)] += env.slip / 4
    R = P[:, :, goal].copy()
    R[goal] = 0.0
    d0 = np.zeros(n)
    d0[env.start] = 1.0
    return TabularMdp(P, R, d0, env.spec.gamma)


def dp_optimal_q(mdp: TabularMdp, horizon: int | None = None, tol: float = 1e-10) -> np.ndarray:
    """Optimal Q by backward induction (shape ``(H, S, A)``) or value iteration (``(S, A)``)."""
    P, R, g = mdp.transition, mdp.reward, mdp.gamma
    if horizon is not None:
        q = np.zeros((horizon, mdp.n_states, mdp.n_actions))
        nxt = np.zeros(mdp.n_states)
        for h in range(horizon - 1, -1, -1):
            q[h] = R + g * P @ nxt
            nxt = q[h].max(axis=1)
        return q
    q = np.zeros((mdp.n_states, mdp.n_actions))
    while True:
        q_new = R + g * P @ q.max(axis=1)
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new


def exact_amq(mdp: TabularMdp, policy: np.ndarray, q: np.ndarray, horizon: int,
              start_dist: np.ndarray | None = None) -> float:
    """Sum over t < H of E[Q(s_t, a_t)] by propagating state occupancy exactly.

    Uses H action draws and H - 1 transitions.
    """
    policy = np.asarray(policy, dtype=np.float64)
    if np.abs(policy.sum(axis=1) - 1.0).max() > 1e-9:
        raise ConfigError("policy rows must sum to 1")
    d = mdp.initial_dist if start_dist is None else np.asarray(start_dist, dtype=np.float64)
    # per-state expected Q under the policy, and the state-to-state kernel
    qbar = (policy * q).sum(axis=1)
    kernel = np.einsum("sa,sax->sx", policy, mdp.transition)
    total = 0.0
    for t in range(horizon):
        total += float(d @ qbar)
        if t + 1 < horizon:
            d = d @ kernel
    return total


# ---------------------------------------------------------------- scripted data collectors

_KIND_RE = re.compile(r"^([a-z\-]+)(?:\((.*)\))?$")


def _parse_kind(kind: str):
    m = _KIND_RE.match(kind.strip())
    if not m:
        raise ConfigError(f"malformed policy kind {kind!r}")
    name, argstr = m.group(1), m.group(2)
    args, kwargs = [], {}
    if argstr:
        for part in argstr.split(","):
            part = part.strip()
            if "=" in part:
                k, v = part.split("=", 1)
                kwargs[k.strip()] = float(v)
            elif part:
                args.append(float(part))
    return name, args, kwargs


@dataclass
class ScriptedPolicy:
    kind: str
    fn: ActionFn = field(repr=False)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.fn(obs)


def scripted_policy(kind: str, rng: np.random.Generator, env: Env | None = None,
                    noise_std: float | None = None) -> ScriptedPolicy:
    """Deterministic behavior rule plus Gaussian action noise of ``noise_std``.

    Kinds: ``pointmass-upper-mode``, ``pointmass-lower-mode``,
    ``pointmass-noisy-medium``, ``pendulum-energy-pump``, ``pendulum-random``,
    ``gridworld-epsilon-greedy(eps[, target=cell])``.
    """
    name, args, kwargs = _parse_kind(kind)

    def noisy(a, std, low, high):
        if std:
            a = a + rng.normal(0.0, std, size=a.shape)
        return np.clip(a, low, high)

    if name in ("pointmass-upper-mode", "pointmass-lower-mode"):
        target = PointMass2D.goals[0 if name == "pointmass-upper-mode" else 1]
        std = 0.1 if noise_std is None else noise_std

        def fn(obs):
            return noisy(np.clip(10.0 * (target - obs[:2]), -1, 1), std, -1, 1)

    elif name == "pointmass-noisy-medium":
        std = 0.6 if noise_std is None else noise_std

        def fn(obs):
            return noisy(np.clip(10.0 * (obs[2:4] - obs[:2]), -1, 1), std, -1, 1)

    elif name == "pendulum-energy-pump":
        std = 0.3 if noise_std is None else noise_std

        def fn(obs):
            return noisy(np.array([2.0 * np.sign(obs[2])]), std, -2, 2)

    elif name == "pendulum-random":

        def fn(obs):
            return rng.uniform(-2.0, 2.0, size=1)

    elif name == "gridworld-epsilon-greedy":
        if not isinstance(env, GridWorld5):
            raise ConfigError("gridworld-epsilon-greedy needs the gridworld env instance")
        eps = args[0] if args else kwargs.get("eps", 0.1)
        target = int(kwargs.get("target", env.goal))
        greedy = dp_optimal_q(gridworld_mdp(env, goal=target)).argmax(axis=1)
        std = 0.1 if noise_std is None else noise_std

        def fn(obs):
            cell = int(np.argmax(obs))
            a = int(rng.integers(4)) if rng.random() < eps else int(greedy[cell])
            vec = -np.ones(4)
            vec[a] = 1.0
            return noisy(vec, std, -1, 1)

    else:
        raise ConfigError(f"unknown scripted policy kind {kind!r}")
    return ScriptedPolicy(kind, fn)


def rollout_return(env: Env, act: ActionFn, rng: np.random.Generator, n_episodes: int = 10) -> float:
    """Mean undiscounted episode return of ``act`` over ``n_episodes``."""
    total = 0.0
    for _ in range(n_episodes):
        obs = env.reset(rng)
        while True:
            res = env.step(act(obs))
            total += res.reward
            obs = res.next_obs
            if res.terminal or res.timeout:
                break
    return total / n_episodes
