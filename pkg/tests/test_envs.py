import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enumerate_amq, finite_horizon_q
from unio4.envs import (EnvSpec, GridWorld5, PendulumLite, PointMass2D, TabularMdp, dp_optimal_q, exact_amq,
                        gridworld_mdp, make_env, rollout_return, scripted_policy)
from unio4.errors import ConfigError


def random_mdp(rng, n_s=3, n_a=2, gamma=0.9):
    P = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    return TabularMdp(P, rng.normal(size=(n_s, n_a)), rng.dirichlet(np.ones(n_s)), gamma)


def test_spec_rejects_inverted_bounds():
    with pytest.raises(ConfigError):
        EnvSpec(1, 1, np.array([1.0]), np.array([0.0]), 10, 0.99)


def test_unknown_env():
    with pytest.raises(ConfigError, match="unknown environment"):
        make_env("cartpole")


def test_pointmass_reset_and_step():
    env = PointMass2D()
    obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (4,) and np.abs(obs[:2]).max() < 0.3
    assert any(np.array_equal(obs[2:], g) for g in PointMass2D.goals)
    pos = obs[:2].copy()
    res = env.step(np.array([2.0, -0.5]))  # clipped to [-1, 1]
    np.testing.assert_allclose(res.next_obs[:2], pos + 0.1 * np.array([1.0, -0.5]))
    assert res.reward == pytest.approx(-np.linalg.norm(res.next_obs[:2] - obs[2:]))


def test_pointmass_terminates_at_goal():
    env = PointMass2D()
    env.reset(np.random.default_rng(0))
    env.pos = env.goal - np.array([0.0, 0.05])
    res = env.step(np.zeros(2))
    assert res.terminal and not res.timeout


def test_shifted_pointmass_hides_shift_from_observation():
    env = make_env("pointmass2d-shifted")
    obs = env.reset(np.random.default_rng(0))
    res = env.step(np.zeros(2))
    assert res.reward == pytest.approx(-np.linalg.norm(obs[:2] - (obs[2:] + np.array([0.4, 0.0]))))


def test_pendulum_dynamics():
    env = PendulumLite()
    obs = env.reset(np.random.default_rng(1))
    th, thd = env.theta, env.theta_dot
    assert obs[0] == pytest.approx(np.cos(th)) and -1 <= thd <= 1
    res = env.step(np.array([1.5]))
    thd2 = thd + 0.05 * (-10 * np.sin(th) + 3.0)
    th2 = th + 0.05 * thd2
    wrapped = (th2 + np.pi) % (2 * np.pi) - np.pi
    assert res.next_obs[2] == pytest.approx(thd2)
    assert res.reward == pytest.approx(-(wrapped**2 + 0.1 * thd2**2 + 0.001 * 1.5**2))


def test_gridworld_one_hot_and_moves():
    env = GridWorld5(slip=0.0)
    obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (25,) and obs.sum() == 1 and obs[0] == 1
    res = env.step(np.array([-1.0, 1.0, -1.0, -1.0]))  # east
    assert np.argmax(res.next_obs) == 1 and res.reward == 0
    assert GridWorld5.move(0, 0) == 0 and GridWorld5.move(0, 3) == 0 and GridWorld5.move(0, 2) == 5


def test_gridworld_goal_reward_and_terminal():
    env = GridWorld5(slip=0.0)
    env.reset(np.random.default_rng(0))
    env.cell = 3
    res = env.step(np.array([0, 1.0, 0, 0]))
    assert res.reward == 1.0 and res.terminal


def test_gridworld_slip_rate():
    env = GridWorld5(slip=0.1)
    rng = np.random.default_rng(0)
    moved_other = 0
    for _ in range(4000):
        env.reset(rng)
        env.cell = 12
        if np.argmax(env.step(np.array([0, 1.0, 0, 0])).next_obs) != 13:
            moved_other += 1
    # a slip picks one of the 3 other moves with prob 0.1 * 3/4
    assert moved_other / 4000 == pytest.approx(0.075, abs=0.015)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["pointmass2d", "pendulum-lite", "gridworld5"]), st.integers(0, 2**32 - 1))
def test_terminal_and_timeout_exclusive(name, seed):
    env = make_env(name)
    rng = np.random.default_rng(seed)
    env.reset(rng)
    for _ in range(env.spec.max_episode_steps):
        res = env.step(rng.uniform(env.spec.action_low, env.spec.action_high))
        assert not (res.terminal and res.timeout)
        if res.terminal or res.timeout:
            break
    assert res.terminal or res.timeout


def test_tabular_mdp_validates_rows():
    with pytest.raises(ConfigError):
        TabularMdp(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9)


def test_gridworld_mdp_rows_normalized():
    mdp = gridworld_mdp(GridWorld5())
    np.testing.assert_allclose(mdp.transition.sum(-1), 1.0, atol=1e-12)
    assert mdp.initial_dist[0] == 1.0


def test_dp_single_state_backward_induction():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(1), 1.0)
    np.testing.assert_allclose(dp_optimal_q(mdp, horizon=3)[:, 0, 0], [3, 2, 1])


def test_dp_zero_reward():
    mdp = random_mdp(np.random.default_rng(0))
    mdp = TabularMdp(mdp.transition, np.zeros_like(mdp.reward), mdp.initial_dist, 0.9)
    assert not dp_optimal_q(mdp).any()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_dp_finite_horizon_matches_loop_oracle(seed, horizon):
    mdp = random_mdp(np.random.default_rng(seed))
    np.testing.assert_allclose(dp_optimal_q(mdp, horizon=horizon),
                               finite_horizon_q(mdp.transition.tolist(), mdp.reward.tolist(), horizon, mdp.gamma),
                               atol=1e-12)


def test_gridworld_dp_truncated_against_enumeration():
    mdp = gridworld_mdp(GridWorld5())
    q3 = dp_optimal_q(mdp, horizon=3)
    oracle = finite_horizon_q(mdp.transition.tolist(), mdp.reward.tolist(), 3, mdp.gamma)
    np.testing.assert_allclose(q3, oracle, atol=1e-12)
    q = dp_optimal_q(mdp)
    # Bellman optimality holds for the discounted table
    np.testing.assert_allclose(q, mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1), atol=1e-8)


def test_exact_amq_horizon_one():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng)
    pi = rng.dirichlet(np.ones(2), size=3)
    q = rng.normal(size=(3, 2))
    assert exact_amq(mdp, pi, q, 1) == pytest.approx(float((mdp.initial_dist[:, None] * pi * q).sum()))


def test_exact_amq_constant_q():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones(1), 0.99)
    assert exact_amq(mdp, np.ones((1, 1)), np.full((1, 1), 2.5), 7) == pytest.approx(17.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_exact_amq_matches_enumeration(seed, horizon):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng)
    pi = rng.dirichlet(np.ones(2), size=3)
    q = rng.normal(size=(3, 2))
    ref = enumerate_amq(mdp.transition.tolist(), mdp.initial_dist.tolist(), pi.tolist(), q.tolist(), horizon)
    assert exact_amq(mdp, pi, q, horizon) == pytest.approx(ref, abs=1e-12)


def test_scripted_pointmass_upper_mode():
    act = scripted_policy("pointmass-upper-mode", np.random.default_rng(0), noise_std=0.0)
    np.testing.assert_allclose(act(np.array([0.0, 0.0, 0.0, 1.0])), [0.0, 1.0])


def test_scripted_pendulum_random_in_bounds():
    act = scripted_policy("pendulum-random", np.random.default_rng(0))
    a = np.array([act(np.zeros(3))[0] for _ in range(2000)])
    assert a.min() >= -2 and a.max() <= 2 and a.std() == pytest.approx(4 / np.sqrt(12), rel=0.1)


def test_scripted_gridworld_greedy_rate():
    env = GridWorld5()
    act = scripted_policy("gridworld-epsilon-greedy(0.3)", np.random.default_rng(0), env)
    greedy = dp_optimal_q(gridworld_mdp(env)).argmax(axis=1)
    obs = env.one_hot(12)
    hits = np.mean([np.argmax(act(obs)) == greedy[12] for _ in range(4000)])
    # greedy with prob 0.7, plus 1/4 of the random draws
    assert hits == pytest.approx(0.7 + 0.3 / 4, abs=0.03)


def test_scripted_gridworld_target_override():
    env = GridWorld5()
    act = scripted_policy("gridworld-epsilon-greedy(0.0, target=20)", np.random.default_rng(0), env)
    assert np.argmax(act(env.one_hot(0))) == 2  # south toward the bottom-left corner


def test_unknown_scripted_kind():
    with pytest.raises(ConfigError):
        scripted_policy("teleport", np.random.default_rng(0))


def test_rollout_return_deterministic():
    env = PointMass2D()
    act = scripted_policy("pointmass-noisy-medium", np.random.default_rng(0), noise_std=0.0)
    a = rollout_return(env, act, np.random.default_rng(3), 5)
    b = rollout_return(env, act, np.random.default_rng(3), 5)
    assert a == b and a < 0
