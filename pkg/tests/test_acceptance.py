"""End-to-end acceptance criteria. Each test prints one PASS/FAIL line; the
conftest hook repeats them, ordered by number, in the terminal summary."""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from acceptance_log import verdict
from oracles import OracleTooLarge, enumerate_amq, expectile_1d
from unio4 import experiments, pipeline
from unio4.config import from_dict, with_override
from unio4.data import Dataset, NormStats, load, save
from unio4.envs import GridWorld5, TabularMdp, dp_optimal_q, exact_amq, gridworld_mdp
from unio4.gradchecks import run_all
from unio4.metrics import read_metrics
from unio4.ope import OPEConfig, TabularPolicy, TabularQ, TabularTransition, amq_estimate, thm2_bound_check
from unio4.policy import Ensemble, GaussianPolicy, load_policy, save_policy, zbound_check
from unio4.value import ValueHeads, fit_values

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def acceptance_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _random_mdp(rng, n_s, n_a, gamma=0.9):
    return TabularMdp(rng.dirichlet(np.ones(n_s), size=(n_s, n_a)), rng.uniform(-1, 1, size=(n_s, n_a)),
                      rng.dirichlet(np.ones(n_s)), gamma)


# --------------------------------------------------------------- 1

def test_c01_gradient_fidelity():
    start = time.time()
    worst, failed = 0.0, []
    for seed in range(3):
        for name, rep in run_all(seed).items():
            worst = max(worst, rep.max_relative_error)
            if not (rep.passed and rep.max_relative_error < 1e-4 and rep.n_checked > 0):
                failed.append(f"{name}@{seed}")
    elapsed = time.time() - start
    ok = not failed and elapsed < 60
    assert verdict(1, "gradient fidelity", ok,
                   f"max rel err {worst:.2e} over 9 losses x 3 seeds, failed={failed}, {elapsed:.1f}s")


# --------------------------------------------------------------- 2

def _expectile_dataset(rng, n=4000):
    acts = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    base, slope = np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.0, -2.0, 0.5, 3.0])
    s = rng.integers(4, size=n)
    a = acts[rng.integers(5, size=n)]
    r = base[s] + slope[s] * a + 0.5 * a**2
    obs = np.eye(4)[s].astype(np.float32)
    # terminal one-step episodes: Q(s, a) = r exactly, so V's target per state is a known sample set
    ds = Dataset(obs, a[:, None].astype(np.float32), r.astype(np.float32), obs, np.ones(n, bool), np.zeros(n, bool),
                 np.arange(n))
    return ds, [r[s == k] for k in range(4)]


def test_c02_expectile_correctness():
    start = time.time()
    errors = {}
    for tau in (0.5, 0.7, 0.9):
        rng = np.random.default_rng(0)
        ds, samples = _expectile_dataset(rng)
        heads = ValueHeads.create(4, 1, rng, NormStats.identity(4), q_hidden=(64, 64), v_hidden=(64, 64),
                                  tau=tau, lr=1e-3)
        fit_values(heads, ds, 3000, 256, rng, lr_decay=True)
        ref = np.array([expectile_1d(x, tau) for x in samples])
        errors[tau] = float(np.max(np.abs(heads.v(np.eye(4)) / ref - 1)))
    elapsed = time.time() - start
    ok = max(errors.values()) < 0.02 and elapsed < 120
    detail = ", ".join(f"tau={t}: {e:.2%}" for t, e in errors.items())
    assert verdict(2, "expectile correctness", ok, f"max rel err {detail}; {elapsed:.1f}s")


# --------------------------------------------------------------- 3

def test_c03_amq_exactness():
    start = time.time()
    env = GridWorld5()
    mdp = gridworld_mdp(env)
    q = dp_optimal_q(mdp)
    probs = 0.6 * np.eye(4)[q.argmax(axis=1)] + 0.1
    rep = amq_estimate(TabularPolicy(probs), TabularTransition(mdp), TabularQ(q), np.eye(25)[[0]],
                       OPEConfig(horizon=5, n_rollouts=10_000), np.random.default_rng(0))
    exact = exact_amq(mdp, probs, q, 5)
    rel = abs(rep.j_hat / exact - 1)
    rng = np.random.default_rng(1)
    worst, checked = 0.0, 0
    for n_s, n_a, h in itertools.product((2, 3, 4), (2, 3), (1, 2, 3, 4, 5)):
        m = _random_mdp(rng, n_s, n_a)
        pi = rng.dirichlet(np.ones(n_a), size=n_s)
        qq = rng.normal(size=(n_s, n_a))
        try:
            ref = enumerate_amq(m.transition.tolist(), m.initial_dist.tolist(), pi.tolist(), qq.tolist(), h)
        except OracleTooLarge:
            continue
        worst = max(worst, abs(exact_amq(m, pi, qq, h) - ref))
        checked += 1
    elapsed = time.time() - start
    ok = rel < 0.01 and worst <= 1e-12 and checked >= 20 and elapsed < 120
    assert verdict(3, "AM-Q exactness", ok, f"MC vs exact rel err {rel:.3%} (j_hat {rep.j_hat:.4f}, "
                                            f"exact {exact:.4f}); exact vs enumeration max abs "
                                            f"{worst:.1e} on {checked} MDPs; {elapsed:.1f}s")


# --------------------------------------------------------------- 4

def test_c04_theorem2_bound():
    start = time.time()
    rng = np.random.default_rng(2024)
    passed, worst_ratio = 0, 0.0
    for trial in range(100):
        mdp = _random_mdp(rng, 3, 2)
        conc = rng.uniform(1.0, 200.0)
        rows = np.array([[rng.dirichlet(conc * p + 1e-3) for p in row] for row in mdp.transition])
        pert = TabularMdp(rows, mdp.reward, mdp.initial_dist, mdp.gamma)
        q = dp_optimal_q(mdp)
        chk = thm2_bound_check(mdp, pert, rng.dirichlet(np.ones(2), size=3), float(np.abs(q).max()),
                               int(rng.integers(2, 8)), q)
        passed += chk.passed
        if np.isfinite(chk.rhs) and chk.rhs > 0:
            worst_ratio = max(worst_ratio, chk.lhs / chk.rhs)
    elapsed = time.time() - start
    ok = passed == 100 and elapsed < 60
    assert verdict(4, "theorem-2 bound", ok, f"{passed}/100 perturbed MDPs within bound, "
                                             f"max lhs/rhs {worst_ratio:.3f}; {elapsed:.1f}s")


# --------------------------------------------------------------- 5

def _member(mean, log_std, rng):
    p = GaussianPolicy.create(1, 1, [-50.0], [50.0], rng, hidden=(4,), log_std_init=log_std)
    p.mean_net.weights[-1][:] = 0.0
    p.mean_net.biases[-1][:] = np.arctanh(mean / 50.0)
    return p


def test_c05_zbound():
    start = time.time()
    rng = np.random.default_rng(5)
    ensembles = [[(0.0, 0.0)], [(0.7, 0.0)] * 3, [(-10.0, 0.0), (10.0, 0.0)]]
    for _ in range(60):
        n = int(rng.integers(1, 7))
        ensembles.append(list(zip(rng.uniform(-20, 20, n), rng.uniform(-3, 1.5, n))))
    bad = 0
    for comps in ensembles:
        ens = Ensemble([_member(m, s, rng) for m, s in comps])
        z, ok = zbound_check(ens, np.zeros(1))
        ok = ok and 1 - 1e-3 <= z <= len(comps) + 1e-3
        bad += not ok
    elapsed = time.time() - start
    ok = bad == 0 and elapsed < 60
    assert verdict(5, "Z-bound", ok, f"{len(ensembles) - bad}/{len(ensembles)} ensembles with 1 <= Z <= n; "
                                     f"{elapsed:.1f}s")


# --------------------------------------------------------------- 6

def test_c06_diversity_ablation(acceptance_root):
    start = time.time()
    res = experiments.diversity_ablation(from_dict({"preset": "pointmass2d"}), range(3),
                                         acceptance_root / "c06")
    med = res["median"]
    kl0, kl1 = med[0.0]["kl"], med[0.1]["kl"]
    ratio = kl1 / max(kl0, 1e-12)
    ret_ok = med[0.1]["offline_return"] >= med[0.0]["offline_return"]
    elapsed = time.time() - start
    ok = ratio >= 2.0 and ret_ok and elapsed < 15 * 60
    per_seed = "; ".join(f"seed {r['seed']}: KL {r[0.0]['kl']:.3g} -> {r[0.1]['kl']:.3g}, return "
                         f"{r[0.0]['offline_return']:.2f} -> {r[0.1]['offline_return']:.2f}" for r in res["rows"])
    assert verdict(6, "diversity ablation", ok,
                   f"median KL alpha=0 {kl0:.4g}, alpha=0.1 {kl1:.4g} (ratio {ratio:.2f}, need >= 2); median "
                   f"return {med[0.0]['offline_return']:.2f} -> {med[0.1]['offline_return']:.2f}; [{per_seed}]; "
                   f"{elapsed / 60:.1f} min")


# --------------------------------------------------------------- 8

def test_c08_multistep_beats_onestep(acceptance_root):
    start = time.time()
    res = experiments.multistep_vs_onestep(from_dict({"preset": "gridworld5"}), range(5), acceptance_root / "c08")
    elapsed = time.time() - start
    degenerate = all(r["one_gate_queries"] == 0 for r in res["rows"])
    ok = res["median_multi"] > res["median_one"] and degenerate and elapsed < 20 * 60
    rows = ", ".join(f"{r['multi']:.2f}/{r['one']:.2f}" for r in res["rows"])
    assert verdict(8, "multi-step beats one-step", ok,
                   f"median return multi {res['median_multi']:.3f} vs one-step {res['median_one']:.3f} "
                   f"(per seed multi/one: {rows}); {elapsed / 60:.1f} min")


# --------------------------------------------------------------- 9

def test_c09_ope_ranking(acceptance_root):
    start = time.time()
    rep = experiments.ope_ranking(from_dict({"preset": "pointmass2d"}), 0, acceptance_root / "c09")
    elapsed = time.time() - start
    n_pool = len(rep["policies"])
    ok = (n_pool >= 6 and rep["pairs"] > 0 and rep["exact_acc"] >= 0.7 and rep["acc_within_20"] >= 0.85
          and elapsed < 15 * 60)
    assert verdict(9, "OPE ranking accuracy", ok,
                   f"pool {n_pool}, {rep['pairs']} untied pairs, ordering acc {rep['exact_acc']:.2%}, "
                   f"within-20% acc {rep['acc_within_20']:.2%}; {elapsed / 60:.1f} min")


# --------------------------------------------------------------- 10

def test_c10_finetune_stability_and_speed(acceptance_root):
    start = time.time()
    res = experiments.finetune_comparison(from_dict({"preset": "pointmass2d"}), range(5), acceptance_root / "c10")
    elapsed = time.time() - start
    no_drop = res["median_first_gap"] >= -0.1
    fast = res["median_reach_fraction"] <= 0.7
    ok = no_drop and fast and elapsed < 40 * 60
    rows = "; ".join(f"seed {r['seed']}: offline {r['offline_return']:.2f}, first {r['first_eval']:.2f}, "
                     f"warm {r['warm_final']:.2f}, scratch {r['scratch_final']:.2f}, reach "
                     f"{r['reach_fraction']:.2f}" for r in res["rows"])
    assert verdict(10, "fine-tuning stability and speed", ok,
                   f"median first-eval gap {res['median_first_gap']:+.1%} (need >= -10%), median fraction of "
                   f"steps to reach scratch final {res['median_reach_fraction']:.2f} (need <= 0.70); [{rows}]; "
                   f"{elapsed / 60:.1f} min")


# --------------------------------------------------------------- 11

def test_c11_online_offline_online(acceptance_root):
    start = time.time()
    res = experiments.online_offline_online(from_dict({"preset": "pointmass2d-shifted"}), range(3),
                                            acceptance_root / "c11")
    elapsed = time.time() - start
    a, b, c = res["median_pretrain"], res["median_offline"], res["median_online"]
    ok = a < b < c and elapsed < 30 * 60
    assert verdict(11, "online-offline-online ordering", ok,
                   f"median returns pretrain {a:.2f} < offline {b:.2f} < online {c:.2f}; "
                   f"{elapsed / 60:.1f} min")


# --------------------------------------------------------------- 7 (replays every offline run above)

def _check_gate_log(run_dir: Path):
    cfg = from_dict(yaml.safe_load((run_dir / "config.yaml").read_text()))
    log = pipeline.load_gate_log(run_dir / "gate_log.jsonl")
    expected = cfg.offline.total_steps // cfg.offline.gate_interval
    counts_ok = all(sum(r.member == i for r in log) == expected for i in range(cfg.bc.n_members))
    monotone = True
    for i in range(cfg.bc.n_members):
        seq = [r.j_live for r in log if r.member == i and r.accepted]
        monotone &= all(b > a for a, b in zip(seq, seq[1:]))
    return counts_ok, monotone, sum(r.accepted for r in log)


def test_c07_gate_monotonicity(acceptance_root):
    own = acceptance_root / "c07"
    cfg = from_dict({"preset": "gridworld5"})
    pipeline.run_collect(cfg, own)
    pipeline.run_train_offline(cfg, own)
    runs = sorted(p.parent for p in acceptance_root.rglob("gate_log.jsonl"))
    results = [_check_gate_log(r) for r in runs]
    bad = [str(r.relative_to(acceptance_root)) for r, (c, m, _) in zip(runs, results) if not (c and m)]
    accepted = sum(a for _, _, a in results)
    ok = not bad and accepted > 0
    assert verdict(7, "gate monotonicity", ok, f"{len(runs)} offline runs replayed, {accepted} acceptances, "
                                               f"violations: {bad or 'none'}")


# --------------------------------------------------------------- 12

TINY = {"preset": "pointmass2d", "collect": {"n_transitions": 800},
        "bc": {"n_members": 2, "steps": 60, "hidden": [16, 16]},
        "value": {"steps": 100, "q_hidden": [16, 16], "v_hidden": [16, 16]},
        "dynamics": {"steps": 60, "hidden": [16, 16]}, "ope": {"horizon": 4, "n_rollouts": 32},
        "offline": {"gate_interval": 5, "total_steps": 20, "minibatch_size": 32}, "finalize": {"eval_episodes": 2},
        "online": {"rollout_horizon": 128, "total_env_steps": 384, "eval_interval": 128, "eval_episodes": 2,
                   "epochs_per_batch": 2, "minibatch_size": 32, "critic_hidden": [16, 16]}}


def test_c12_determinism_and_persistence(tmp_path):
    cfg = from_dict(TINY)
    streams = []
    for name in ("a", "b"):
        root = tmp_path / name
        pipeline.run_collect(cfg, root)
        pipeline.run_train_offline(cfg, root)
        pipeline.run_finetune_online(cfg, root)
        streams.append([(root / rel).read_bytes() for rel in
                        ("dataset.uo4d", "offline/metrics.jsonl", "online/metrics.jsonl", "offline/policy.uo4p",
                         "online/policy.uo4p", "offline/gate_log.jsonl")])
    identical = streams[0] == streams[1]
    changed = pipeline.run_collect(with_override(cfg, "seed", 1), tmp_path / "c")
    differs = not changed.equals(load(tmp_path / "a" / "dataset.uo4d"))

    ds = load(tmp_path / "a" / "dataset.uo4d")
    save(ds, tmp_path / "copy.uo4d")
    data_rt = (tmp_path / "copy.uo4d").read_bytes() == (tmp_path / "a" / "dataset.uo4d").read_bytes()
    pol = load_policy(tmp_path / "a" / "online" / "policy.uo4p")
    save_policy(pol, tmp_path / "copy.uo4p")
    ckpt_rt = (tmp_path / "copy.uo4p").read_bytes() == (tmp_path / "a" / "online" / "policy.uo4p").read_bytes()
    n_records = len(read_metrics(tmp_path / "a" / "offline" / "metrics.jsonl"))
    ok = identical and differs and data_rt and ckpt_rt and n_records > 0
    assert verdict(12, "determinism and persistence", ok,
                   f"repeat run byte-identical={identical} ({n_records} offline metric records), other seed "
                   f"differs={differs}, dataset round trip={data_rt}, checkpoint round trip={ckpt_rt}")
