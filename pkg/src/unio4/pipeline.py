"""End-to-end stages over an output directory: collect, offline training, OPE, online PPO, sweeps."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_io
from .config import RunConfig, dump_config, with_override
from .data import Dataset
from .dynamics import GaussianDynamics, load_dynamics, save_dynamics, train_dynamics
from .envs import Env, make_env, rollout_return, scripted_policy
from .errors import ConfigError
from .metrics import MetricsWriter
from .offline import GateRecord, accepted_sequences, evaluate_members, finalize, run_offline
from .online import Critic, run_online, save_critic
from .ope import amq_estimate
from .policy import (BCConfig, Ensemble, GaussianPolicy, kl_pairwise_estimate, load_policy, mean_pairwise_kl,
                     save_policy, train_bc)
from .seeding import derive_seed, stream
from .value import ValueHeads, fit_values, load_values, save_values

SWEEP_AXES = {"alpha": "bc.alpha", "ensemble_n": "bc.n_members", "ope_interval": "offline.gate_interval",
              "tau": "value.tau"}


@dataclass
class Layout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.uo4d"

    @property
    def offline(self) -> Path:
        return self.root / "offline"

    @property
    def pretrain(self) -> Path:
        return self.root / "pretrain"

    def online(self, scratch: bool) -> Path:
        return self.root / ("online_scratch" if scratch else "online")

    def metrics(self, stage: str) -> Path:
        return self.root / "metrics" / f"{stage}.jsonl"


# ---------------------------------------------------------------- artifact guard

def guard(directory: Path, stage: str, config_hash: str, force: bool) -> None:
    """Refuse to overwrite outputs produced under a different configuration."""
    manifest = directory / f"{stage}.manifest.json"
    if manifest.exists() and not force:
        old = json.loads(manifest.read_text())["config_hash"]
        if old != config_hash:
            raise ConfigError(f"{manifest} was written with config hash {old}, current is {config_hash}; "
                              "pass --force to overwrite")


def write_manifest(directory: Path, stage: str, config_hash: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stage}.manifest.json").write_text(json.dumps({"stage": stage, "config_hash": config_hash}))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def read_json(path: Path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- helpers

def env_for(cfg: RunConfig, name: str | None = None) -> Env:
    return make_env(name or cfg.env, **cfg.env_kwargs)


def eval_seed(cfg: RunConfig) -> int:
    return derive_seed(cfg.seed, cfg.online.eval_seed_name)


def evaluate_policy(cfg: RunConfig, env: Env, policy: GaussianPolicy, episodes: int | None = None) -> float:
    """Deterministic-mode return under the run's fixed evaluation seed."""
    n = episodes or cfg.online.eval_episodes
    return rollout_return(env, policy.act_fn(), np.random.default_rng(eval_seed(cfg)), n)


def _project(env: Env):
    return env.project_obs if type(env).project_obs is not Env.project_obs else None


def _scratch_pair(cfg: RunConfig, env: Env, name: str):
    rng = stream(cfg.seed, name, "init")
    spec = env.spec
    policy = GaussianPolicy.create(spec.obs_dim, spec.act_dim, spec.action_low, spec.action_high, rng,
                                   hidden=cfg.bc.hidden, log_std_init=cfg.bc.log_std_init)
    critic = Critic.create(spec.obs_dim, rng, hidden=cfg.online.critic_hidden)
    return policy, critic


# ---------------------------------------------------------------- stages

def run_collect(cfg: RunConfig, out: Path, force: bool = False, path: Path | None = None) -> Dataset:
    lay = Layout(out)
    path = Path(path) if path else lay.dataset
    h = cfg.section_hash("collect")
    guard(path.parent, "collect", h, force)
    env = env_for(cfg)
    mixture = []
    for j, entry in enumerate(cfg.collect.mixture):
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise ConfigError(f"collect.mixture[{j}] must be a [kind, weight] pair")
        kind, weight = entry
        rng = stream(cfg.seed, "collect", "behavior", j)
        if kind == "pretrained":
            act = load_policy(lay.pretrain / "policy.uo4p").act_fn(rng, deterministic=False)
        else:
            act = scripted_policy(kind, rng, env)
        mixture.append((act, float(weight)))
    dataset = data_io.collect(env, mixture, cfg.collect.n_transitions, stream(cfg.seed, "collect", "env"))
    path.parent.mkdir(parents=True, exist_ok=True)
    data_io.save(dataset, path)
    write_manifest(path.parent, "collect", h)
    return dataset


def collect_summary(dataset: Dataset) -> dict:
    rets = dataset.episode_returns()
    return {"N": len(dataset), "episodes": dataset.n_episodes,
            "return_mean": float(rets.mean()) if len(rets) else 0.0,
            "return_std": float(rets.std()) if len(rets) else 0.0,
            "return_min": float(rets.min()) if len(rets) else 0.0,
            "return_max": float(rets.max()) if len(rets) else 0.0}


OFFLINE_SECTIONS = ("collect", "bc", "value", "dynamics", "ope", "offline", "finalize", "pretrain")


def run_train_offline(cfg: RunConfig, out: Path, force: bool = False, dataset_path: Path | None = None,
                      out_dir: Path | None = None, metrics: MetricsWriter | None = None) -> dict:
    """Behavior ensemble, value heads and dynamics, then gated multi-step improvement."""
    lay = Layout(out)
    dest = Path(out_dir) if out_dir else lay.offline
    h = cfg.section_hash(*OFFLINE_SECTIONS)
    guard(dest, "train-offline", h, force)
    dataset = data_io.load(dataset_path or lay.dataset)
    env = env_for(cfg)
    spec = env.spec
    if dataset.obs.shape[1] != spec.obs_dim or dataset.act.shape[1] != spec.act_dim:
        raise ConfigError(f"dataset shapes {dataset.obs.shape[1]}/{dataset.act.shape[1]} do not match env "
                          f"{cfg.env} ({spec.obs_dim}/{spec.act_dim})")
    stats = data_io.compute_norm_stats(dataset)
    own_metrics = metrics is None
    metrics = metrics or MetricsWriter(dest / "metrics.jsonl")
    offline_cfg = cfg.offline
    try:
        pretrained = lay.pretrain / "policy.uo4p"
        if pretrained.exists():
            # behavior initialized from simulator pretraining instead of BC
            base = load_policy(pretrained)
            ensemble = Ensemble([base.copy() for _ in range(cfg.bc.n_members)], disagreement_alpha=cfg.bc.alpha)
            offline_cfg = type(offline_cfg)(**{**vars(offline_cfg),
                                               "disagreement_alpha_offline": cfg.pretrain.alpha_offline})
            bc_loss = None
        else:
            ensemble = Ensemble.create(cfg.bc.n_members, spec.obs_dim, spec.act_dim, spec.action_low,
                                       spec.action_high, stream(cfg.seed, "bc", "init"), hidden=cfg.bc.hidden,
                                       alpha=cfg.bc.alpha, stats=stats)
            for m in ensemble.members:
                m.log_std[:] = cfg.bc.log_std_init
            ensemble.refresh_snapshots()
            losses = train_bc(ensemble, dataset, cfg.bc, stream(cfg.seed, "bc", "train"), metrics.logger("bc"))
            bc_loss = losses[-1] if losses else None
        diag_states = dataset.obs[stream(cfg.seed, "diag").integers(0, len(dataset), size=64)]
        bc_kl = mean_pairwise_kl(kl_pairwise_estimate(ensemble, diag_states, stream(cfg.seed, "diag", "kl"),
                                                     m=1024))
        bc_returns = [evaluate_policy(cfg, env, m, cfg.finalize.eval_episodes) for m in ensemble.members]

        vc = cfg.value
        heads = ValueHeads.create(spec.obs_dim, spec.act_dim, stream(cfg.seed, "value", "init"), stats,
                                  q_hidden=vc.q_hidden, v_hidden=vc.v_hidden, tau=vc.tau,
                                  polyak_rate=vc.polyak_rate, gamma=spec.gamma, lr=vc.lr)
        fit_values(heads, dataset, vc.steps, vc.batch_size, stream(cfg.seed, "value", "train"),
                   metrics.logger("value"), vc.lr_decay)
        dc = cfg.dynamics
        dyn = GaussianDynamics.create(spec.obs_dim, spec.act_dim, stream(cfg.seed, "dynamics", "init"), stats,
                                      hidden=dc.hidden, lr=dc.lr)
        train_dynamics(dyn, dataset, dc.steps, dc.batch_size, stream(cfg.seed, "dynamics", "train"),
                       metrics.logger("dynamics"), dc.nll_beta)
        project = _project(env)
        gate_log = run_offline(ensemble, heads, dyn, dataset, offline_cfg, cfg.ope, stream(cfg.seed, "offline"),
                               project, metrics.logger("offline"))
        reports = evaluate_members(ensemble, heads, dyn, dataset, cfg.ope, derive_seed(cfg.seed, "ope", "final"),
                                   project)
        policy, shortlist, shortlist_returns = finalize(ensemble, reports, cfg.finalize.k, env,
                                                        stream(cfg.seed, "finalize"), cfg.finalize.eval_episodes)
        offline_return = evaluate_policy(cfg, env, policy, cfg.finalize.eval_episodes)
    finally:
        if own_metrics:
            metrics.close()

    dest.mkdir(parents=True, exist_ok=True)
    save_policy(policy, dest / "policy.uo4p")
    for i, (m, s) in enumerate(zip(ensemble.members, ensemble.behavior_snapshots)):
        save_policy(m, dest / f"member{i}.uo4p")
        save_policy(s, dest / f"snapshot{i}.uo4p")
    save_values(heads, dest / "values.uo4v")
    save_dynamics(dyn, dest / "dynamics.uo4t")
    with open(dest / "gate_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in gate_log:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    summary = {
        "offline_return": offline_return,
        "bc_returns": bc_returns,
        "bc_final_loss": bc_loss,
        "bc_mean_pairwise_kl": bc_kl,
        "gate_queries": len(gate_log),
        "accepted": [int(k) for k in ensemble.iteration_counts],
        "accepted_sequences": accepted_sequences(gate_log, len(ensemble)),
        "ope_reports": [r.to_dict() for r in reports],
        "shortlist": shortlist,
        "shortlist_returns": {str(k): v for k, v in shortlist_returns.items()},
        "final_member": shortlist[0] if cfg.finalize.k == 1 else max(
            shortlist, key=lambda i: (shortlist_returns[i], -i)),
    }
    _write_json(dest / "summary.json", summary)
    (dest / "config.yaml").write_text(dump_config(cfg))
    write_manifest(dest, "train-offline", h)
    return summary


def load_gate_log(path: Path) -> list[GateRecord]:
    with open(path, encoding="utf-8") as fh:
        return [GateRecord(**json.loads(line)) for line in fh if line.strip()]


def run_evaluate_ope(cfg: RunConfig, out: Path) -> dict:
    lay = Layout(out)
    dataset = data_io.load(lay.dataset)
    heads = load_values(lay.offline / "values.uo4v")
    dyn = load_dynamics(lay.offline / "dynamics.uo4t")
    project = _project(env_for(cfg))
    seed = derive_seed(cfg.seed, "ope", "final")
    policies = {"final": load_policy(lay.offline / "policy.uo4p")}
    i = 0
    while (lay.offline / f"member{i}.uo4p").exists():
        policies[f"member{i}"] = load_policy(lay.offline / f"member{i}.uo4p")
        i += 1
    reports = {name: amq_estimate(p, dyn, heads, dataset, cfg.ope, np.random.default_rng(seed), k, project, seed)
               .to_dict() for k, (name, p) in enumerate(policies.items())}
    _write_json(lay.offline / "ope_report.json", reports)
    return reports


def pairwise_ranking(true_returns, estimates, tie_tolerance: float = 1e-9) -> dict:
    """Ordering agreement between estimates and true returns over all untied pairs.

    A pair counts as within-delta correct when the orderings agree or the true
    returns differ by at most delta times the larger magnitude.
    """
    g = np.asarray(true_returns, dtype=np.float64)
    e = np.asarray(estimates, dtype=np.float64)
    if len(g) < 2 or len(g) != len(e):
        raise ConfigError("need at least two policies with matching estimates")
    exact = within10 = within20 = pairs = 0
    for i in range(len(g)):
        for j in range(i + 1, len(g)):
            diff = g[i] - g[j]
            if abs(diff) <= tie_tolerance:
                continue
            pairs += 1
            ok = np.sign(diff) == np.sign(e[i] - e[j])
            scale = max(abs(g[i]), abs(g[j]))
            exact += ok
            within10 += ok or abs(diff) <= 0.1 * scale
            within20 += ok or abs(diff) <= 0.2 * scale
    acc = (lambda c: c / pairs) if pairs else (lambda c: None)
    return {"pairs": pairs, "exact_acc": acc(exact), "acc_within_10": acc(within10),
            "acc_within_20": acc(within20)}


def build_policy_pool(cfg: RunConfig, out: Path) -> dict[str, GaussianPolicy]:
    """BC checkpoints at increasing step counts plus the offline-trained members."""
    lay = Layout(out)
    dataset = data_io.load(lay.dataset)
    env = env_for(cfg)
    spec = env.spec
    stats = data_io.compute_norm_stats(dataset)
    pool: dict[str, GaussianPolicy] = {}
    for steps in sorted(set(int(s) for s in cfg.ope_accuracy.bc_checkpoints)):
        ens = Ensemble.create(1, spec.obs_dim, spec.act_dim, spec.action_low, spec.action_high,
                              stream(cfg.seed, "pool", "init"), hidden=cfg.bc.hidden, alpha=0.0, stats=stats)
        bc = BCConfig(**{**vars(cfg.bc), "n_members": 1, "alpha": 0.0, "steps": steps})
        train_bc(ens, dataset, bc, stream(cfg.seed, "pool", "train"))
        pool[f"bc{steps}"] = ens.members[0]
    if cfg.ope_accuracy.include_offline:
        i = 0
        while (lay.offline / f"member{i}.uo4p").exists():
            pool[f"offline{i}"] = load_policy(lay.offline / f"member{i}.uo4p")
            i += 1
    return pool


def run_ope_accuracy(cfg: RunConfig, out: Path, pool: dict[str, GaussianPolicy] | None = None) -> dict:
    lay = Layout(out)
    pool = pool if pool is not None else build_policy_pool(cfg, out)
    if len(pool) < 2:
        raise ConfigError(f"OPE accuracy needs a pool of at least 2 policies, got {len(pool)}")
    dataset = data_io.load(lay.dataset)
    heads = load_values(lay.offline / "values.uo4v")
    dyn = load_dynamics(lay.offline / "dynamics.uo4t")
    env = env_for(cfg)
    project = _project(env)
    seed = derive_seed(cfg.seed, "ope", "accuracy")
    names = list(pool)
    estimates, truths = [], []
    for k, name in enumerate(names):
        p = pool[name]
        estimates.append(amq_estimate(p, dyn, heads, dataset, cfg.ope, np.random.default_rng(seed), k,
                                      project, seed).j_hat)
        # true value of the same stochastic policy AM-Q evaluates
        rng = stream(cfg.seed, "ope-accuracy", "truth")
        truths.append(rollout_return(env, p.act_fn(rng, deterministic=False), rng, cfg.ope_accuracy.n_episodes))
    report = pairwise_ranking(truths, estimates, cfg.ope_accuracy.tie_tolerance)
    report["policies"] = [{"name": n, "amq": e, "true_return": t} for n, e, t in zip(names, estimates, truths)]
    _write_json(lay.root / "ope_accuracy.json", report)
    return report


ONLINE_SECTIONS = OFFLINE_SECTIONS + ("online",)


def run_finetune_online(cfg: RunConfig, out: Path, scratch: bool = False, force: bool = False) -> dict:
    """Warm start from the offline policy and V-hat (frozen dataset normalization) or from scratch."""
    lay = Layout(out)
    dest = lay.online(scratch)
    h = cfg.section_hash(*(("online",) if scratch else ONLINE_SECTIONS))
    guard(dest, "finetune-online", h, force)
    env = env_for(cfg)
    if scratch:
        policy, critic = _scratch_pair(cfg, env, "online-scratch")
        obs_norm = "running"
        offline_return = None
    else:
        policy = load_policy(lay.offline / "policy.uo4p")
        critic = Critic.from_value_heads(load_values(lay.offline / "values.uo4v"))
        obs_norm = "frozen"
        offline_return = evaluate_policy(cfg, env, policy)
    with MetricsWriter(dest / "metrics.jsonl") as mw:
        hist = run_online(policy, critic, env, cfg.online, stream(cfg.seed, "online", "scratch" if scratch else "warm"),
                          eval_seed=eval_seed(cfg), obs_norm=obs_norm, log=mw.logger("online"))
    save_policy(policy, dest / "policy.uo4p")
    save_critic(critic, dest / "critic.uo4c")
    summary = {"scratch": scratch, "offline_return": offline_return,
               "eval_curve": [[m["env_steps"], m["mean_eval_return"]] for m in hist],
               "final_return": hist[-1]["mean_eval_return"], "updates": len(hist) - 1}
    _write_json(dest / "summary.json", summary)
    write_manifest(dest, "finetune-online", h)
    return summary


def run_pretrain_online(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Scratch PPO in the pretraining simulator; outputs seed the offline stage."""
    lay = Layout(out)
    h = cfg.section_hash("pretrain", "online")
    guard(lay.pretrain, "pretrain-online", h, force)
    env = env_for(cfg, cfg.pretrain.env)
    policy, critic = _scratch_pair(cfg, env, "pretrain")
    online = type(cfg.online)(**{**vars(cfg.online), "total_env_steps": cfg.pretrain.total_env_steps})
    with MetricsWriter(lay.pretrain / "metrics.jsonl") as mw:
        hist = run_online(policy, critic, env, online, stream(cfg.seed, "pretrain", "train"),
                          eval_seed=eval_seed(cfg), obs_norm="running", log=mw.logger("pretrain"))
    save_policy(policy, lay.pretrain / "policy.uo4p")
    save_critic(critic, lay.pretrain / "critic.uo4c")
    target_return = evaluate_policy(cfg, env_for(cfg), policy)
    summary = {"pretrain_env": cfg.pretrain.env, "pretrain_return": hist[-1]["mean_eval_return"],
               "target_env_return": target_return, "updates": len(hist) - 1}
    _write_json(lay.pretrain / "summary.json", summary)
    write_manifest(lay.pretrain, "pretrain-online", h)
    return summary


def run_sweep(cfg: RunConfig, out: Path, axis: str | None = None, values=None, force: bool = False) -> dict:
    axis = axis or cfg.sweep.axis
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; known: {sorted(SWEEP_AXES)}")
    values = list(values if values is not None else cfg.sweep.values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    lay = Layout(out)
    if not lay.dataset.exists():
        run_collect(cfg, out, force)
    rows = []
    for v in values:
        sub = with_override(cfg, SWEEP_AXES[axis], v)
        summary = run_train_offline(sub, out, force, dataset_path=lay.dataset,
                                    out_dir=lay.root / "sweep" / f"{axis}={v}")
        rows.append({"value": v, "offline_return": summary["offline_return"],
                     "mean_pairwise_kl": summary["bc_mean_pairwise_kl"],
                     "gate_queries": summary["gate_queries"], "accepted": sum(summary["accepted"])})
    report = {"axis": axis, "rows": rows}
    _write_json(lay.root / "sweep" / f"{axis}.json", report)
    return report


def run_report(out: Path) -> dict:
    """Collect every stage summary under ``out`` into one document."""
    lay = Layout(out)
    if not lay.root.exists():
        raise FileNotFoundError(f"output directory not found: {lay.root}")
    report = {}
    if lay.dataset.exists():
        report["dataset"] = collect_summary(data_io.load(lay.dataset))
    for name, path in (("pretrain", lay.pretrain), ("offline", lay.offline), ("online", lay.online(False)),
                       ("online_scratch", lay.online(True))):
        if (path / "summary.json").exists():
            report[name] = read_json(path / "summary.json")
    for extra in ("ope_accuracy.json",):
        if (lay.root / extra).exists():
            report[extra.removesuffix(".json")] = read_json(lay.root / extra)
    _write_json(lay.root / "report.json", report)
    return report
