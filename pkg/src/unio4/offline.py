"""Multi-step offline improvement of each ensemble member behind an AM-Q gate."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericError
from .envs import Env, rollout_return
from .nn import Adam
from .ope import OPEConfig, OPEReport, accept_replacement, amq_estimate, select_top_k
from .policy import Ensemble, GaussianPolicy
from .value import ValueHeads, advantage


@dataclass
class OfflineOptConfig:
    clip_epsilon: float = 0.25
    gate_interval: int = 100
    total_steps: int = 10_000
    minibatch_size: int = 256
    actions_per_state: int = 1
    adv_normalize: bool = True
    disagreement_alpha_offline: float = 0.0
    lr: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon:
            raise ConfigError("clip_epsilon must be positive")
        if self.gate_interval < 1 or self.total_steps < 0 or self.minibatch_size < 1:
            raise ConfigError("gate_interval, total_steps and minibatch_size must be positive")


@dataclass
class GateRecord:
    step: int
    member: int
    j_live: float
    j_snapshot: float
    accepted: bool
    k_after: int

    def to_dict(self):
        return asdict(self)


def clipped_surrogate(ratio, adv, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def clipped_surrogate_grad(ratio, adv, eps: float):
    """d/d ratio of the clipped surrogate: adv where the unclipped branch is active, else 0."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    active = ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.where(active, adv, 0.0)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def surrogate_loss_and_grad(policy: GaussianPolicy, obs, act, logp_old, adv, eps: float):
    """Negative mean clipped surrogate and its gradient w.r.t. ``policy`` params."""
    logp = policy.log_prob(obs, act)
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - logp_old)
    bad = ~np.isfinite(ratio)
    if bad.any():
        raise NumericError(f"non-finite importance ratio at batch row {int(np.argmax(bad))}")
    n = len(ratio)
    loss = -float(clipped_surrogate(ratio, adv, eps).mean())
    upstream = -clipped_surrogate_grad(ratio, adv, eps) * ratio / n
    _, grads = policy.log_prob_grad(obs, act, upstream)
    return loss, grads, ratio


def disagreement_term_and_grad(ensemble: Ensemble, i: int, obs, act, alpha: float):
    """alpha * mean log(pi_i / max_j pi_j) on dataset pairs; max over snapshots with member i live."""
    member = ensemble.members[i]
    logp_i = member.log_prob(obs, act)
    others = [s.log_prob(obs, act) for j, s in enumerate(ensemble.behavior_snapshots) if j != i]
    best_other = np.max(others, axis=0) if others else np.full(len(logp_i), -np.inf)
    is_max = logp_i >= best_other
    value = alpha * float(np.where(is_max, 0.0, logp_i - best_other).mean())
    _, grads = member.log_prob_grad(obs, act, alpha * (~is_max) / len(logp_i))
    return value, grads


def offline_epoch(i: int, ensemble: Ensemble, heads: ValueHeads, dataset: Dataset, cfg: OfflineOptConfig,
                  rng: np.random.Generator, opt: Adam) -> float:
    """One minibatch ascent step of member ``i`` on the clipped surrogate."""
    member = ensemble.members[i]
    snapshot = ensemble.behavior_snapshots[i]
    idx = rng.integers(0, len(dataset), size=cfg.minibatch_size)
    obs = np.repeat(dataset.obs[idx].astype(np.float64), cfg.actions_per_state, axis=0)
    act = snapshot.sample(obs, rng)
    logp_old = snapshot.log_prob(obs, act)
    adv = advantage(heads, obs, act)
    if cfg.adv_normalize:
        adv = normalize_advantages(adv)
    loss, grads, ratio = surrogate_loss_and_grad(member, obs, act, logp_old, adv, cfg.clip_epsilon)
    if cfg.disagreement_alpha_offline > 0:
        d_obs = dataset.obs[idx].astype(np.float64)
        d_act = dataset.act[idx].astype(np.float64)
        term, d_grads = disagreement_term_and_grad(ensemble, i, d_obs, d_act, cfg.disagreement_alpha_offline)
        # grads are of a loss; the disagreement term is maximized
        grads = [g - dg for g, dg in zip(grads, d_grads)]
        loss -= term
    opt.step(member.params(), grads)
    member.clamp()
    return -loss


def run_offline(ensemble: Ensemble, heads: ValueHeads, dynamics, dataset: Dataset, cfg: OfflineOptConfig,
                ope_cfg: OPEConfig, rng: np.random.Generator, project=None, log=None) -> list[GateRecord]:
    """Algorithm-1 middle stage: per-step updates, an OPE gate every ``gate_interval`` steps.

    Rejected live policies keep training from their current parameters. One OPE
    seed serves every query of the run, so a snapshot re-evaluates to exactly
    the value it was accepted with.
    """
    opts = [Adam(lr=cfg.lr) for _ in ensemble.members]
    seed = int(rng.integers(2**62))
    gate_log: list[GateRecord] = []
    for step in range(1, cfg.total_steps + 1):
        surr = [offline_epoch(i, ensemble, heads, dataset, cfg, rng, opts[i]) for i in range(len(ensemble))]
        if step % cfg.gate_interval:
            continue
        record = {}
        for i in range(len(ensemble)):
            live = amq_estimate(ensemble.members[i], dynamics, heads, dataset, ope_cfg,
                                np.random.default_rng(seed), i, project, seed)
            old = amq_estimate(ensemble.behavior_snapshots[i], dynamics, heads, dataset, ope_cfg,
                               np.random.default_rng(seed), i, project, seed)
            accepted = accept_replacement(live, old, ope_cfg.margin)
            if accepted:
                ensemble.replace_snapshot(i)
            rec = GateRecord(step, i, live.j_hat, old.j_hat, accepted, ensemble.iteration_counts[i])
            gate_log.append(rec)
            record.update({f"member{i}_surrogate": surr[i], f"member{i}_j_live": live.j_hat,
                           f"member{i}_j_snapshot": old.j_hat, f"member{i}_accepted": accepted,
                           f"member{i}_k": rec.k_after})
        if log is not None:
            log(step, record)
    return gate_log


def accepted_sequences(gate_log: list[GateRecord], n_members: int) -> list[list[float]]:
    """Per member, the snapshot value recorded at each acceptance, in order.

    Each accepted record contributes ``j_live``; a member's sequence is
    strictly increasing when every later acceptance beats the earlier ones.
    """
    seqs: list[list[float]] = [[] for _ in range(n_members)]
    for rec in gate_log:
        if rec.accepted:
            seqs[rec.member].append(rec.j_live)
    return seqs


def evaluate_members(ensemble: Ensemble, heads: ValueHeads, dynamics, dataset: Dataset, ope_cfg: OPEConfig,
                     seed: int, project=None) -> list[OPEReport]:
    return [amq_estimate(m, dynamics, heads, dataset, ope_cfg, np.random.default_rng(seed), i, project, seed)
            for i, m in enumerate(ensemble.members)]


def finalize(ensemble: Ensemble, reports: list[OPEReport], k: int = 1, env: Env | None = None,
             rng: np.random.Generator | None = None, n_episodes: int = 10):
    """Pick the top AM-Q member; with ``k > 1`` break the shortlist by environment return.

    Returns ``(policy, shortlist, env_returns)``; ``env_returns`` is empty when k == 1.
    """
    shortlist = select_top_k(reports, k)
    if k == 1 or env is None:
        return ensemble.members[shortlist[0]], shortlist, {}
    returns = {i: rollout_return(env, ensemble.members[i].act_fn(), rng, n_episodes) for i in shortlist}
    best = max(shortlist, key=lambda i: (returns[i], -i))
    return ensemble.members[best], shortlist, returns
