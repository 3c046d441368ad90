"""Finite-difference checks for every trainable loss, on small random instances."""
from __future__ import annotations

import numpy as np

from .data import NormStats
from .dynamics import GaussianDynamics, nll_loss_and_grad
from .nn import GradCheckReport, finite_diff_gradcheck
from .offline import clipped_surrogate_grad, disagreement_term_and_grad, surrogate_loss_and_grad
from .online import Critic, policy_loss_and_grad, value_loss_and_grad
from .policy import Ensemble, GaussianPolicy, bc_ensemble_loss
from .value import ValueHeads, q_loss_and_grad, v_loss_and_grad


def _jitter(params, rng, scale=0.3):
    for p in params:
        p += scale * rng.standard_normal(p.shape)


def _stats(rng, dim):
    return NormStats(rng.normal(size=dim), rng.uniform(0.5, 2.0, size=dim))


def _pattern_guard(signature):
    """Exclude perturbed points whose active-branch pattern differs from the base point's."""
    base = signature()
    return lambda: not np.array_equal(signature(), base)


def _policy(rng, obs_dim=3, act_dim=2):
    pol = GaussianPolicy.create(obs_dim, act_dim, -np.ones(act_dim), np.ones(act_dim), rng, hidden=(5, 4),
                                stats=_stats(rng, obs_dim))
    _jitter(pol.params(), rng)
    return pol


def check_bc(rng, alpha: float) -> GradCheckReport:
    ens = Ensemble.create(3, 3, 2, -np.ones(2), np.ones(2), rng, hidden=(5, 4), alpha=alpha)
    for m in ens.members:
        _jitter(m.params(), rng)
    ens.refresh_snapshots()
    for m in ens.members:
        _jitter(m.params(), rng, 0.1)
    obs = rng.normal(size=(7, 3))
    act = rng.uniform(-0.9, 0.9, size=(7, 2))

    def loss():
        losses, grads = bc_ensemble_loss(ens, obs, act, alpha)
        return losses[0], grads[0]

    def signature():
        own = ens.members[0].log_prob(obs, act)
        rest = np.max([s.log_prob(obs, act) for s in ens.behavior_snapshots[1:]], axis=0)
        return own >= rest

    return finite_diff_gradcheck(loss, ens.members[0].params(), exclude=_pattern_guard(signature))


def check_disagreement(rng) -> GradCheckReport:
    ens = Ensemble.create(3, 3, 2, -np.ones(2), np.ones(2), rng, hidden=(5, 4))
    for m in ens.members:
        _jitter(m.params(), rng)
    ens.refresh_snapshots()
    obs = rng.normal(size=(7, 3))
    act = rng.uniform(-0.9, 0.9, size=(7, 2))

    def loss():
        value, grads = disagreement_term_and_grad(ens, 0, obs, act, 0.5)
        return -value, [-g for g in grads]

    def signature():
        own = ens.members[0].log_prob(obs, act)
        return own >= np.max([s.log_prob(obs, act) for s in ens.behavior_snapshots[1:]], axis=0)

    return finite_diff_gradcheck(loss, ens.members[0].params(), exclude=_pattern_guard(signature))


def _heads(rng):
    heads = ValueHeads.create(3, 2, rng, _stats(rng, 3), q_hidden=(5, 4), v_hidden=(5, 4), tau=0.8)
    for net in (heads.q_net, heads.v_net, heads.target_q):
        _jitter(net.params(), rng)
    return heads


def check_expectile_v(rng) -> GradCheckReport:
    heads = _heads(rng)
    obs, act = rng.normal(size=(9, 3)), rng.uniform(-1, 1, size=(9, 2))
    sign = lambda: heads.q(obs, act, target=True) - heads.v(obs) < 0  # noqa: E731
    return finite_diff_gradcheck(lambda: v_loss_and_grad(heads, obs, act), heads.v_net.params(),
                                 exclude=_pattern_guard(sign))


def check_q(rng) -> GradCheckReport:
    heads = _heads(rng)
    obs, act, nxt = rng.normal(size=(9, 3)), rng.uniform(-1, 1, size=(9, 2)), rng.normal(size=(9, 3))
    rew, term = rng.normal(size=9), rng.random(9) < 0.3
    return finite_diff_gradcheck(lambda: q_loss_and_grad(heads, obs, act, rew, nxt, term), heads.q_net.params(),
                                 exclude=_relu_guard(heads.q_net, lambda: heads.q_input(obs, act)))


def _relu_guard(net, inputs):
    def signature():
        _, (_, zs, _) = net.forward_cache(inputs())
        return np.concatenate([(z > 0).ravel() for z in zs[:-1]])
    return _pattern_guard(signature)


def check_dynamics(rng) -> GradCheckReport:
    model = GaussianDynamics.create(3, 2, rng, _stats(rng, 3), hidden=(5, 4))
    _jitter(model.net.params(), rng)
    obs, act = rng.normal(size=(8, 3)), rng.uniform(-1, 1, size=(8, 2))
    nxt = obs + 0.3 * rng.normal(size=(8, 3))
    return finite_diff_gradcheck(lambda: nll_loss_and_grad(model, obs, act, nxt), model.net.params(),
                                 exclude=_relu_guard(model.net, lambda: model._input(obs, act)))


def _ratio_batch(rng, pol):
    obs = rng.normal(size=(10, 3))
    old = pol.copy()
    _jitter(pol.params(), rng, 0.15)
    act = old.sample(obs, rng)
    return obs, act, old.log_prob(obs, act), rng.normal(size=10)


def check_offline_surrogate(rng) -> GradCheckReport:
    pol = _policy(rng)
    obs, act, logp_old, adv = _ratio_batch(rng, pol)
    eps = 0.25

    def loss():
        value, grads, _ = surrogate_loss_and_grad(pol, obs, act, logp_old, adv, eps)
        return value, grads

    active = lambda: clipped_surrogate_grad(np.exp(pol.log_prob(obs, act) - logp_old), adv, eps) != 0  # noqa: E731
    return finite_diff_gradcheck(loss, pol.params(), exclude=_pattern_guard(active))


def check_ppo_policy(rng) -> GradCheckReport:
    pol = _policy(rng)
    obs, act, logp_old, adv = _ratio_batch(rng, pol)
    eps = 0.1

    def loss():
        value, grads, _, _ = policy_loss_and_grad(pol, obs, act, logp_old, adv, eps, entropy_coef=0.01)
        return value, grads

    active = lambda: clipped_surrogate_grad(np.exp(pol.log_prob(obs, act) - logp_old), adv, eps) != 0  # noqa: E731
    return finite_diff_gradcheck(loss, pol.params(), exclude=_pattern_guard(active))


def check_ppo_value(rng) -> GradCheckReport:
    critic = Critic.create(3, rng, hidden=(5, 4), stats=_stats(rng, 3))
    _jitter(critic.net.params(), rng)
    obs = rng.normal(size=(10, 3))
    v_old = critic.value(obs) + rng.normal(0, 0.2, size=10)
    targets = rng.normal(size=10)
    eps = 0.1

    def signature():
        v = critic.value(obs)
        clipped = v_old + np.clip(v - v_old, -eps, eps)
        return np.concatenate([(clipped - targets) ** 2 > (v - targets) ** 2, np.abs(v - v_old) < eps])

    return finite_diff_gradcheck(lambda: value_loss_and_grad(critic, obs, v_old, targets, eps, True),
                                 critic.net.params(), exclude=_pattern_guard(signature))


CHECKS = {
    "bc": lambda rng: check_bc(rng, 0.0),
    "ensemble_bc_penalty": lambda rng: check_bc(rng, 0.5),
    "offline_disagreement": check_disagreement,
    "expectile_v": check_expectile_v,
    "q_td": check_q,
    "dynamics_nll": check_dynamics,
    "offline_surrogate": check_offline_surrogate,
    "ppo_policy": check_ppo_policy,
    "ppo_value_clipped": check_ppo_value,
}


def run_all(seed: int = 0) -> dict[str, GradCheckReport]:
    return {name: fn(np.random.default_rng([seed, i])) for i, (name, fn) in enumerate(CHECKS.items())}
