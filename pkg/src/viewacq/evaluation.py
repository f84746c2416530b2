"""Baselines, RL evaluation and the lambda sweep, all over cached subset tables."""

from __future__ import annotations

import itertools
import logging
from dataclasses import replace

import numpy as np

from viewacq.env import BatchEnv, EpisodeTrace, SubsetOutcomes
from viewacq.errors import ConfigError
from viewacq.metrics import MetricsReport, average_reports, balanced_accuracy, make_report
from viewacq.selector import PolicyNets, PPOConfig, collect_rollout, train_selector

log = logging.getLogger(__name__)


def _codes_from_subsets(subsets, n_views: int) -> np.ndarray:
    return np.array([sum(1 << v for v in s) for s in subsets], dtype=np.int64)


def report_for_codes(table: SubsetOutcomes, codes, method: str, **meta) -> MetricsReport:
    """Metrics of the frozen model's predictions when study ``i`` is observed under mask ``codes[i]``."""
    rows = np.arange(len(table))
    codes = np.broadcast_to(np.asarray(codes, dtype=np.int64), rows.shape)
    counts = ((codes[:, None] >> np.arange(table.n_views)) & 1).sum(axis=1)
    st = table.studies
    return make_report(method, table.pred_as[rows, codes], table.pred_ef[rows, codes], table.mu_ef[rows, codes],
                       st.y_as_class, st.y_ef, counts, table.n_views, table.probs.shape[2], **meta)


def _check_k(k: int, n_views: int) -> None:
    if not 1 <= k <= n_views:
        raise ConfigError(f"k must lie in [1, {n_views}], got {k}")


def eval_full(table: SubsetOutcomes, **meta) -> MetricsReport:
    return report_for_codes(table, 2 ** table.n_views - 1, "full", **meta)


def random_k_codes(rng: np.random.Generator, n: int, n_views: int, k: int) -> np.ndarray:
    """One uniformly drawn k-subset per study, as bit codes."""
    keys = rng.random((n, n_views))
    chosen = np.argsort(keys, axis=1)[:, :k]
    return (1 << chosen).sum(axis=1)


def eval_random_k(table: SubsetOutcomes, k: int, n_runs: int = 5, seed: int = 0, **meta) -> MetricsReport:
    """Mean and std over ``n_runs`` draws of a random k-subset per study."""
    _check_k(k, table.n_views)
    reports = []
    for run in range(n_runs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, run]))
        codes = random_k_codes(rng, len(table), table.n_views, k)
        reports.append(report_for_codes(table, codes, "random", k=k, seed=seed, **meta))
    return average_reports(reports, extra={"n_runs": n_runs})


def popwise_scores(val: SubsetOutcomes, k: int) -> list[tuple[tuple[int, ...], float]]:
    """Validation mean bACC of every k-subset, in lexicographic order."""
    _check_k(k, val.n_views)
    rows = np.arange(len(val))
    st = val.studies
    out = []
    for subset in itertools.combinations(range(val.n_views), k):
        code = _codes_from_subsets([subset], val.n_views)[0]
        b_as = balanced_accuracy(val.pred_as[rows, code], st.y_as_class, val.probs.shape[2])
        b_ef = balanced_accuracy(val.pred_ef[rows, code], st.ef_category, val.probs.shape[3])
        out.append((subset, 0.5 * (b_as + b_ef)))
    return out


def best_popwise_subset(val: SubsetOutcomes, k: int) -> tuple[int, ...]:
    best, best_score = None, -np.inf
    for subset, score in popwise_scores(val, k):
        if score > best_score:  # strict: lexicographically first wins ties
            best, best_score = subset, score
    return best


def eval_popwise_k(val: SubsetOutcomes, test: SubsetOutcomes, k: int, **meta) -> MetricsReport:
    subset = best_popwise_subset(val, k)
    code = _codes_from_subsets([subset], test.n_views)[0]
    rep = report_for_codes(test, code, "popwise", k=k, **meta)
    rep.extra["subset"] = list(subset)
    return rep


def rollout_traces(table: SubsetOutcomes, ro, cost_lambda: float, costs=None) -> list[EpisodeTrace]:
    """Convert a batched rollout into per-study traces; the reward split follows ``BatchEnv``."""
    env = BatchEnv(table, cost_lambda, costs)
    n = table.n_views
    st = table.studies
    sparse = env.sparse(ro.rows, ro.final_codes)
    traces = []
    for j, row in enumerate(ro.rows):
        steps = np.nonzero(ro.alive[:, j])[0]
        actions = [int(a) for a in ro.actions[steps, j]]
        dense = [float(r) for a, r in zip(actions, ro.rewards[steps, j]) if a != n]
        code = int(ro.final_codes[j])
        traces.append(EpisodeTrace(
            study_id=int(st.ids[row]),
            actions=actions,
            dense_rewards=dense,
            sparse_reward=float(sparse[j]),
            final_pmf=table.probs[row, code].tolist(),
            pred_as=int(table.pred_as[row, code]),
            pred_ef=int(table.pred_ef[row, code]),
            mu_ef=float(table.mu_ef[row, code]),
            y_as_class=int(st.y_as_class[row]),
            y_ef=float(st.y_ef[row]),
            forced=bool(actions[-1] != n),
            n_views=n,
        ))
    return traces


def eval_rl(table: SubsetOutcomes, nets: PolicyNets, cost_lambda: float, costs=None,
            max_acquisitions: int | None = None, greedy: bool = True, seed: int = 0,
            **meta) -> tuple[MetricsReport, list[EpisodeTrace]]:
    """Policy episodes on every study; argmax actions unless ``greedy`` is False."""
    env = BatchEnv(table, cost_lambda, costs, max_acquisitions)
    rows = np.arange(len(table))
    rng = None if greedy else np.random.default_rng(seed)
    ro = collect_rollout(nets, env, rows, rng, greedy=greedy)
    rep = report_for_codes(table, ro.final_codes, "rl", cost_lambda=cost_lambda, **meta)
    sparse = env.sparse(rows, ro.final_codes)
    rep.mean_reward = float(sparse.mean())
    rep.extra["mean_return"] = float(ro.episode_returns.mean())
    return rep, rollout_traces(table, ro, cost_lambda, costs)


def sweep_lambda(train: SubsetOutcomes, val: SubsetOutcomes, test: SubsetOutcomes, lambdas, seeds,
                 cfg: PPOConfig = PPOConfig(), costs=None, config_hash: str = "",
                 n_jobs: int = 1) -> tuple[list[MetricsReport], list[MetricsReport]]:
    """One selector per (lambda, seed). Returns (per-run reports, summary rows).

    The summary holds a full-study "w/o RL" row followed by one mean ± std row per lambda.
    """
    jobs = [(float(lam), int(seed)) for lam in lambdas for seed in seeds]
    args = [(train, val, test, lam, replace(cfg, seed=seed), costs, config_hash) for lam, seed in jobs]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(n_jobs) as pool:
            runs = list(pool.map(_sweep_job, args))
    else:
        runs = [_sweep_job(a) for a in args]
    full = eval_full(test, config_hash=config_hash)
    full.method = "w/o RL"
    rows = [full]
    for lam in lambdas:
        group = [r for r in runs if r.cost_lambda == float(lam)]
        rows.append(average_reports(group, seed=None, extra={"seeds": [r.seed for r in group]}))
    return runs, rows


def _sweep_job(args) -> MetricsReport:
    train, val, test, lam, cfg, costs, chash = args
    log.info("sweep lambda %g seed %d", lam, cfg.seed)
    nets = train_selector(train, val, lam, cfg, costs)
    rep, _ = eval_rl(test, nets, lam, costs, cfg.max_acquisitions, seed=cfg.seed, config_hash=chash)
    rep.seed = cfg.seed
    return rep
