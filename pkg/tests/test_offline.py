import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unio4.data import Dataset
from unio4.envs import PointMass2D
from unio4.errors import ConfigError, NumericError
from unio4.nn import Adam
from unio4.offline import (OfflineOptConfig, accepted_sequences, clipped_surrogate, clipped_surrogate_grad,
                           disagreement_term_and_grad, finalize, normalize_advantages, offline_epoch, run_offline,
                           surrogate_loss_and_grad)
from unio4.ope import OPEConfig, OPEReport
from unio4.policy import Ensemble, GaussianPolicy


class BanditHeads:
    """Q(a) = -|a|^2 and V = 0 on a single state."""

    def q(self, obs, act, target=False):
        return -(np.atleast_2d(act) ** 2).sum(axis=1)

    def v(self, obs):
        return np.zeros(len(np.atleast_2d(obs)))


class Frozen:
    def predict_next(self, states, actions, mode, rng):
        return states


def bandit_policy(mean=1.0, seed=0, log_std=np.log(0.3)):
    p = GaussianPolicy.create(1, 1, [-2.0], [2.0], np.random.default_rng(seed), hidden=(8,), log_std_init=log_std)
    p.mean_net.weights[-1][:] = 0.0
    p.mean_net.biases[-1][:] = np.arctanh(mean / 2.0)
    return p


def bandit_dataset(n=64):
    z = np.zeros((n, 1), np.float32)
    return Dataset(z, z.copy(), np.zeros(n, np.float32), z.copy(), np.ones(n, bool), np.zeros(n, bool),
                   np.arange(n))


@pytest.mark.parametrize("ratio,adv,eps,expected", [(1.0, 0.7, 0.25, 0.7), (1.0, -3.0, 0.1, -3.0),
                                                    (1.5, 1.0, 0.25, 1.25), (0.5, -2.0, 0.25, -1.5)])
def test_clipped_surrogate_examples(ratio, adv, eps, expected):
    assert clipped_surrogate(ratio, adv, eps) == pytest.approx(expected)


@given(st.floats(0.01, 3.0), st.floats(-5, 5), st.floats(0.05, 0.5))
def test_clipped_surrogate_grad_matches_difference(ratio, adv, eps):
    h = 1e-7
    if min(abs(ratio - 1 - eps), abs(ratio - 1 + eps)) < 1e-5:
        return
    num = (clipped_surrogate(ratio + h, adv, eps) - clipped_surrogate(ratio - h, adv, eps)) / (2 * h)
    assert clipped_surrogate_grad(ratio, adv, eps) == pytest.approx(num, abs=1e-6)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50).filter(lambda x: np.std(x) > 1e-3))
def test_normalize_advantages(x):
    out = normalize_advantages(np.array(x))
    assert abs(out.mean()) < 1e-6 and out.std() == pytest.approx(1.0, abs=1e-6)


def test_member_equal_to_snapshot_gives_plain_policy_gradient():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy.create(2, 1, [-1.0], [1.0], rng)
    obs = rng.normal(size=(16, 2))
    act = pol.sample(obs, rng)
    adv = normalize_advantages(rng.normal(size=16))
    loss, grads, ratio = surrogate_loss_and_grad(pol, obs, act, pol.log_prob(obs, act), adv, 0.25)
    np.testing.assert_allclose(ratio, 1.0)
    assert loss == pytest.approx(-adv.mean(), abs=1e-12)
    _, ref = pol.log_prob_grad(obs, act, -adv / 16)
    for g, r in zip(grads, ref):
        np.testing.assert_allclose(g, r, atol=1e-14)


def test_nonfinite_ratio_names_row():
    pol = GaussianPolicy.create(2, 1, [-1.0], [1.0], np.random.default_rng(0))
    logp_old = np.array([0.0, -1e6, 0.0])
    with pytest.raises(NumericError, match="row 1"):
        surrogate_loss_and_grad(pol, np.zeros((3, 2)), np.zeros((3, 1)), logp_old, np.ones(3), 0.25)


def test_config_validation():
    with pytest.raises(ConfigError):
        OfflineOptConfig(gate_interval=0)
    with pytest.raises(ConfigError):
        OfflineOptConfig(clip_epsilon=0.0)


def test_bandit_member_moves_toward_optimum():
    ens = Ensemble([bandit_policy()])
    ds = bandit_dataset()
    cfg = OfflineOptConfig(minibatch_size=128, lr=1e-3)
    rng = np.random.default_rng(0)
    opt = Adam(lr=cfg.lr)
    trace = []
    for _ in range(500):
        offline_epoch(0, ens, BanditHeads(), ds, cfg, rng, opt)
        trace.append(abs(float(ens.members[0].mean(np.zeros(1))[0])))
    smooth = np.convolve(trace, np.ones(50) / 50, mode="valid")
    assert (np.diff(smooth[::50]) < 0).all()
    assert trace[-1] < 0.9


def test_gates_drive_bandit_further_than_one_step():
    ds = bandit_dataset()
    ope = OPEConfig(horizon=1, n_rollouts=256)

    def final_mean(interval):
        ens = Ensemble([bandit_policy()])
        cfg = OfflineOptConfig(minibatch_size=128, lr=1e-3, gate_interval=interval, total_steps=600)
        log = run_offline(ens, BanditHeads(), Frozen(), ds, cfg, ope, np.random.default_rng(0))
        return abs(float(ens.members[0].mean(np.zeros(1))[0])), log

    multi, log = final_mean(50)
    one, no_gates = final_mean(10**6)
    assert no_gates == []
    assert any(r.accepted for r in log)
    assert multi < one


@pytest.mark.parametrize("total,interval", [(100, 30), (90, 30), (20, 30)])
def test_gate_count_and_monotone(total, interval):
    rng = np.random.default_rng(1)
    ens = Ensemble([bandit_policy(0.8, seed=s) for s in range(2)])
    cfg = OfflineOptConfig(minibatch_size=32, lr=3e-3, gate_interval=interval, total_steps=total)
    log = run_offline(ens, BanditHeads(), Frozen(), bandit_dataset(), cfg, OPEConfig(horizon=1, n_rollouts=64), rng)
    for i in range(2):
        assert sum(r.member == i for r in log) == total // interval
    for seq in accepted_sequences(log, 2):
        assert all(b > a for a, b in zip(seq, seq[1:]))
    if total < interval:
        assert ens.iteration_counts == [0, 0]


def test_metrics_record_per_gate():
    records = []
    ens = Ensemble([bandit_policy(seed=s) for s in range(2)])
    cfg = OfflineOptConfig(minibatch_size=16, gate_interval=5, total_steps=10)
    run_offline(ens, BanditHeads(), Frozen(), bandit_dataset(), cfg, OPEConfig(horizon=1, n_rollouts=16),
                np.random.default_rng(0), log=lambda step, rec: records.append((step, rec)))
    assert [s for s, _ in records] == [5, 10]
    assert {"member0_j_live", "member1_accepted", "member1_k"} <= set(records[0][1])


def test_disagreement_zero_where_member_dominates():
    ens = Ensemble([bandit_policy(0.0, seed=0), bandit_policy(1.5, seed=1)])
    obs, act = np.zeros((4, 1)), np.zeros((4, 1))
    value, grads = disagreement_term_and_grad(ens, 0, obs, act, 0.1)
    assert value == 0.0 and all(not g.any() for g in grads)
    value, _ = disagreement_term_and_grad(ens, 1, obs, act, 0.1)
    assert value < 0


def _reports(js):
    return [OPEReport(i, j, 0.0, 8, 3, 0) for i, j in enumerate(js)]


def test_finalize_single_and_argmax():
    a, b, c = (bandit_policy(m, seed=i) for i, m in enumerate((0.1, 0.2, 0.3)))
    pol, short, rets = finalize(Ensemble([a]), _reports([0.0]))
    assert pol is a and short == [0] and rets == {}
    pol, short, _ = finalize(Ensemble([a, b, c]), _reports([0.1, 0.7, 0.3]))
    assert pol is b and short == [1]


def test_finalize_shortlist_uses_env_return():
    env = PointMass2D()
    good = GaussianPolicy.create(4, 2, -np.ones(2), np.ones(2), np.random.default_rng(0))
    bad = good.copy()
    pol, short, rets = finalize(Ensemble([good, bad]), _reports([1.0, 0.9]), k=2, env=env,
                                rng=np.random.default_rng(0), n_episodes=2)
    assert set(short) == {0, 1} and set(rets) == {0, 1}
    assert pol is (good if rets[0] >= rets[1] else bad)
