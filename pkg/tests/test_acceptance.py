"""Acceptance run: one test per criterion, each printing a PASS/FAIL line.

These train full-size models on synthetic data and take a long time on a
single core; deselect with ``-m "not acceptance"``.
"""

import filecmp
import json
import time

import numpy as np
import pytest

from gradcheck import check_gradients
from viewacq import cli
from viewacq.diagnostics import DiagnosticModel, DiagTrainConfig, EncoderConfig, evaluate_full, loss_total_terms, \
    train_diagnostic
from viewacq.env import EnvState, SubsetOutcomes
from viewacq.evaluation import eval_full, eval_popwise_k, eval_random_k, eval_rl
from viewacq.metrics import average_reports, balanced_accuracy
from viewacq.numerics import autodiff as ops
from viewacq.oracle import bayes_predictions, hindsight_best_batch, mc_pmf
from viewacq.pathways import build_pathway_tree
from viewacq.probmodel import CategoryGrid, GaussianJoint, discretize, discretize_batch, js_divergence_arrays
from viewacq.selector import PolicyNets, PPOConfig, observation, ppo_loss, train_selector
from viewacq.synthstudy import GeneratorConfig, generate_dataset, split_dataset

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

LAMBDAS = (0.001, 0.01, 0.05, 0.1, 0.2, 0.5)
SEEDS = (0, 1, 2, 3, 4)


def oracle_mean_bacc(studies) -> float:
    masks = np.ones(studies.embeddings.shape[:2], dtype=bool)
    pa, pe, _ = bayes_predictions(studies, masks, studies.config)
    return 0.5 * (balanced_accuracy(pa, studies.y_as_class, 3) + balanced_accuracy(pe, studies.ef_category, 3))


def build_pipeline(n_patients: int, patience: int | None = None, **gen):
    """Generate, split, train the diagnostic model and cache every subset outcome."""
    t0 = time.time()
    st = generate_dataset(GeneratorConfig(n_patients=n_patients, **gen))
    sp = split_dataset(st, seed=0)
    tr, va, te = st.select_ids(sp.train), st.select_ids(sp.val), st.select_ids(sp.test)
    t1 = time.time()
    model = train_diagnostic(tr, va, cfg=DiagTrainConfig(patience=patience))
    train_time = time.time() - t1
    tables = [SubsetOutcomes.build(model, s) for s in (tr, va, te)]
    return {"studies": (tr, va, te), "model": model, "tables": tables, "diag_time": train_time,
            "time": time.time() - t0}


@pytest.fixture(scope="module")
def default_pipe():
    return build_pipeline(5000)


@pytest.fixture(scope="module")
def big_pipe():
    """13,334 studies, so the test split holds 2,000."""
    return build_pipeline(13_334, patience=10)


@pytest.fixture(scope="module")
def sweep(big_pipe):
    """One selector per (lambda, seed) on the large pipeline, with its test report and traces."""
    tr, va, te = big_pipe["tables"]
    runs = {}
    for lam in LAMBDAS:
        for seed in SEEDS:
            nets = train_selector(tr, va, lam, PPOConfig(seed=seed))
            rep, traces = eval_rl(te, nets, lam, seed=seed)
            runs[(lam, seed)] = (rep, traces)
    return runs


def test_c1_gradients(record):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst_diag = worst_ppo = 0.0
    for i in range(100):
        heads = int(rng.integers(1, 3))
        cfg = EncoderConfig(layers=int(rng.integers(1, 3)), heads=heads, token_dim=4 * heads,
                            ff_dim=int(rng.integers(4, 9)), head_hidden=int(rng.integers(3, 7)),
                            n_views=int(rng.integers(2, 5)), embed_dim=int(rng.integers(2, 5)),
                            per_view_projection=bool(i % 2), seed=i)
        m = DiagnosticModel(cfg)
        b = 3
        x = rng.normal(size=(b, cfg.n_views, cfg.embed_dim))
        mask = rng.random((b, cfg.n_views)) < 0.6
        ya, ye = rng.integers(0, 3, b), rng.uniform(0.1, 0.9, b)

        def diag_loss():
            mu, std, _ = m.forward(x, mask)
            return ops.mean(loss_total_terms(mu, std, ya, ye))
        worst_diag = max(worst_diag, check_gradients(diag_loss, m.params.tensors(), rng, coords_per_tensor=2))

        n_views = int(rng.integers(1, 4))
        nets = PolicyNets(n_views, int(rng.integers(1, 3)), hidden=int(rng.integers(3, 9)), seed=i)
        obs = rng.normal(size=(6, nets.obs_dim))
        legal = rng.random((6, n_views + 1)) < 0.7
        legal[:, -1] = True
        acts, lp, _ = nets.act_batch(obs, legal, rng)
        lp = lp + rng.normal(scale=0.05, size=6)
        adv, ret = rng.normal(size=6), rng.normal(size=6)
        worst_ppo = max(worst_ppo, check_gradients(
            lambda: ppo_loss(nets, obs, legal, acts, lp, adv, ret, PPOConfig())[0],
            nets.params.tensors(), rng, coords_per_tensor=2))
    elapsed = time.time() - t0
    ok = worst_diag < 1e-4 and worst_ppo < 1e-4 and elapsed < 120
    record(1, ok, f"worst rel err encoder {worst_diag:.2e}, PPO {worst_ppo:.2e}; {elapsed:.0f}s (< 120s)")
    assert ok


def test_c2_probabilistic_core(record):
    rng = np.random.default_rng(7)
    t0 = time.time()
    grid = CategoryGrid()
    worst = 0.0
    for i in range(20):
        sd = rng.uniform(0.05, 0.4, 2)
        rho = rng.uniform(-0.9, 0.9)
        c = rho * sd[0] * sd[1]
        j = GaussianJoint(rng.uniform(0.1, 0.9, 2), [[sd[0] ** 2, c], [c, sd[1] ** 2]])
        diff = np.abs(discretize(j, grid).probs - mc_pmf(j, grid, 10_000_000, rng=i).probs).max()
        worst = max(worst, float(diff))
    p = rng.dirichlet(np.ones(9), 100_000).reshape(-1, 3, 3)
    q = rng.dirichlet(np.full(9, 0.3), 100_000).reshape(-1, 3, 3)
    js = js_divergence_arrays(p, q)
    js_ok = bool((js >= 0).all() and (js <= np.log(2)).all())
    sds = rng.uniform(0.01, 0.5, (10_000, 2))
    rho = rng.uniform(-0.95, 0.95, 10_000)
    cov = np.stack([np.stack([sds[:, 0] ** 2, rho * sds[:, 0] * sds[:, 1]], -1),
                    np.stack([rho * sds[:, 0] * sds[:, 1], sds[:, 1] ** 2], -1)], 1)
    probs, _ = discretize_batch(rng.uniform(-0.5, 1.5, (10_000, 2)), cov, grid)
    resid = float(np.abs(probs.sum(axis=(1, 2)) - 1).max())
    elapsed = time.time() - t0
    ok = worst < 4.7e-4 and js_ok and resid < 1e-6 and elapsed < 300
    record(2, ok, f"max |discretize - MC| {worst:.2e} (< 4.7e-4); JS in [0, ln 2]: {js_ok}; "
                  f"norm residual {resid:.1e}; {elapsed:.0f}s")
    assert ok


def test_c3_masking_invariance(record, default_pipe):
    model = default_pipe["model"]
    tr = default_pipe["studies"][0]
    nets = PolicyNets(5, 32, seed=3)
    rng = np.random.default_rng(11)
    changed = 0
    for i in range(1000):
        mask = rng.random(5) < 0.5
        emb = tr.embeddings[i]
        clean = EnvState(None, mask, np.where(mask[:, None], emb, 0.0), int(mask.sum()), None)
        noisy = EnvState(None, mask, np.where(mask[:, None], emb, rng.normal(scale=50, size=emb.shape)),
                         int(mask.sum()), None)
        a, b = model.predict_joint(clean), model.predict_joint(noisy)
        legal = np.append(~mask, True)[None]
        la = nets.logits(observation(clean)[None], legal)
        lb = nets.logits(observation(noisy)[None], legal)
        same = (np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma) and np.array_equal(la, lb))
        changed += not same
    record(3, changed == 0, f"{changed} of 1000 states changed under masked-row perturbation")
    assert changed == 0


def test_c4_diagnostic_ceiling(record, default_pipe):
    st = generate_dataset(GeneratorConfig(n_patients=5000, noise_std=0.01))
    sp = split_dataset(st, seed=0)
    tr, va, te = st.select_ids(sp.train), st.select_ids(sp.val), st.select_ids(sp.test)
    t0 = time.time()
    clean_model = train_diagnostic(tr, va, cfg=DiagTrainConfig())
    clean_time = time.time() - t0
    clean = evaluate_full(clean_model, te)["mean_bacc"]
    clean_oracle = oracle_mean_bacc(te)
    te_d = default_pipe["studies"][2]
    dflt = evaluate_full(default_pipe["model"], te_d)["mean_bacc"]
    dflt_oracle = oracle_mean_bacc(te_d)
    times = max(clean_time, default_pipe["diag_time"])
    ok = (clean >= 0.95 and clean_oracle - clean <= 0.03 and dflt_oracle - dflt <= 0.08 and times < 600)
    record(4, ok, f"noise 0.01: model {100 * clean:.1f} vs oracle {100 * clean_oracle:.1f}; default noise: "
                  f"model {100 * dflt:.1f} vs oracle {100 * dflt_oracle:.1f}; slowest training {times:.0f}s")
    assert ok


def test_c5_baseline_ordering(record, big_pipe):
    t0 = time.time()
    tr, va, te = big_pipe["tables"]
    lines, ok = [], True
    for k in (1, 2, 3):
        rnd = eval_random_k(te, k, n_runs=5)
        pop = eval_popwise_k(va, te, k)
        reps = []
        for seed in SEEDS:
            nets = train_selector(tr, va, 0.001, PPOConfig(seed=seed, max_acquisitions=k))
            reps.append(eval_rl(te, nets, 0.001, max_acquisitions=k)[0])
        rl = average_reports(reps)
        ok &= rl.mean_bacc >= rnd.mean_bacc + 1 and rl.mean_bacc >= pop.mean_bacc
        lines.append(f"k={k}: RL {rl.mean_bacc:.1f} (count {rl.mean_count:.2f}) random {rnd.mean_bacc:.1f} "
                     f"popwise {pop.mean_bacc:.1f}")
    elapsed = time.time() - t0 + big_pipe["time"]
    ok &= elapsed < 1800
    record(5, ok, f"{len(te.studies)} test studies; " + "; ".join(lines) + f"; pipeline {elapsed / 60:.1f} min")
    assert ok


def _sweep_means(sweep):
    out = {}
    for lam in LAMBDAS:
        out[lam] = average_reports([sweep[(lam, s)][0] for s in SEEDS])
    return out


def test_c6_budget_performance(record, big_pipe, sweep):
    full = eval_full(big_pipe["tables"][2]).mean_bacc
    means = _sweep_means(sweep)
    hits = [lam for lam, r in means.items() if r.mean_bacc >= full - 1.5 and r.acq_ratio <= 80]
    table = ", ".join(f"{lam:g}: {r.mean_bacc:.1f}/{r.acq_ratio:.0f}%" for lam, r in means.items())
    record(6, bool(hits), f"full {full:.1f}; lambda: bACC/ratio {table}; qualifying {hits}")
    assert hits


def test_c7_lambda_monotonicity(record, sweep):
    means = _sweep_means(sweep)
    counts = [means[lam].mean_count for lam in LAMBDAS]
    rises = [b - a for a, b in zip(counts, counts[1:]) if b > a]
    last = means[LAMBDAS[-1]]
    ok = (len(rises) <= 1 and all(r <= 0.1 for r in rises) and last.mean_count < 0.2
          and abs(last.mean_bacc - 100 / 3) <= 5)
    record(7, ok, "counts " + ", ".join(f"{c:.2f}" for c in counts)
           + f"; largest lambda count {last.mean_count:.2f}, bACC {last.mean_bacc:.1f}")
    assert ok


def test_c8_hindsight_dominance(record, big_pipe, sweep):
    te = big_pipe["tables"][2]
    worst = np.inf
    for (lam, seed), (rep, traces) in sweep.items():
        _, best = hindsight_best_batch(te, lam)
        rl = np.array([t.sparse_reward for t in traces])
        worst = min(worst, float(np.min(best - rl)))
        worst = min(worst, float(best.mean() - rep.mean_reward))
    ok = worst >= 0
    record(8, ok, f"min (hindsight - RL) reward over {len(sweep)} runs, per study and in mean: {worst:.3f}")
    assert ok


def test_c9_reproducibility(record, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "data": {"n_patients": 400},
        "encoder": {"layers": 1, "heads": 2, "token_dim": 16, "ff_dim": 32, "head_hidden": 16},
        "diag_train": {"epochs": 3},
        "ppo": {"epochs": 3},
    }))
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        base = ["--config", str(cfg), "--out-dir", str(d), "--seed", "5", "--deterministic"]
        for cmd in (["gen-data"], ["split"], ["train-diag"], ["train-policy", "--lambda", "0.05"],
                    ["eval", "--method", "rl", "--lambda", "0.05"], ["eval", "--method", "random", "--k", "2"]):
            assert cli.main(base + cmd) == 0
    names = ["dataset.pacq", "split.json", "diag.pdxm", "policy_l0p05_s5.psel", "metrics.jsonl",
             "traces_l0p05_s5.jsonl"]
    same = [filecmp.cmp(dirs[0] / n, dirs[1] / n, shallow=False) for n in names]
    record(9, all(same), "bit-identical: " + ", ".join(f"{n}={s}" for n, s in zip(names, same)))
    assert all(same)


def test_c10_pathway_integrity(record, big_pipe, sweep):
    n_test = len(big_pipe["tables"][2])
    bad = []
    for key, (_, traces) in sweep.items():
        tree = build_pathway_tree(traces)
        if tree.check_flow() or sum(n.terminating for n in tree.nodes.values()) != n_test:
            bad.append(key)
    record(10, not bad, f"{len(sweep)} evaluation runs checked, {len(bad)} with flow or partition errors")
    assert not bad
