"""Command-line entry point.

Heavy modules are imported lazily so that thread-count environment
variables are in place before numpy loads its BLAS.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1

DATASET = "dataset.pacq"
SPLIT = "split.json"
DIAG = "diag.pdxm"
METRICS = "metrics.jsonl"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS")

log = logging.getLogger("viewacq")


def lam_tag(lam: float) -> str:
    return f"{lam:g}".replace(".", "p")


def policy_path(out: Path, lam: float, seed: int) -> Path:
    return out / f"policy_l{lam_tag(lam)}_s{seed}.psel"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewacq", description="Per-patient echo view acquisition pipeline.")
    p.add_argument("--config", help="YAML or JSON pipeline config")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out-dir", default="runs/default", help="artifact directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads and sweep worker processes")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-identical output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic study set")
    g.add_argument("--n-patients", type=int)
    g.add_argument("--noise-std", type=float)

    sub.add_parser("split", help="train/val/test split of the dataset")
    sub.add_parser("train-diag", help="train the diagnostic model")

    t = sub.add_parser("train-policy", help="train one PPO selector")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--max-acquisitions", type=int)

    e = sub.add_parser("eval", help="evaluate a method on the test split")
    e.add_argument("--method", choices=("full", "random", "popwise", "rl"), required=True)
    e.add_argument("--k", type=int, help="budget for random and popwise")
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--max-acquisitions", type=int)
    e.add_argument("--stochastic", action="store_true", help="sample policy actions instead of argmax")

    s = sub.add_parser("sweep-lambda", help="train and evaluate one selector per (lambda, seed)")
    s.add_argument("--lambdas", type=float, nargs="+")
    s.add_argument("--seeds", type=int, nargs="+")

    w = sub.add_parser("pathways", help="export the pathway tree of an RL evaluation")
    w.add_argument("--lambda", dest="lam", type=float)
    w.add_argument("--min-count", type=int, default=1, help="hide DOT nodes and edges below this count")

    o = sub.add_parser("oracle-check", help="compare the model with the Bayes and hindsight oracles")
    o.add_argument("--lambda", dest="lam", type=float)
    return p


def configure_threads(threads: int | None, deterministic: bool) -> None:
    n = 1 if deterministic else threads
    if n is not None:
        for var in THREAD_VARS:
            os.environ[var] = str(n)


class Context:
    """Loads config and cached artifacts on demand."""

    def __init__(self, args):
        from viewacq.config import PipelineConfig, load_config

        self.args = args
        cfg = load_config(args.config) if args.config else PipelineConfig()
        self.cfg = cfg.with_seed(args.seed) if args.seed is not None else cfg
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._tables = None

    @property
    def lam(self) -> float:
        v = getattr(self.args, "lam", None)
        return self.cfg.eval.cost_lambda if v is None else v

    def dataset(self):
        from viewacq.synthstudy import load_dataset

        return load_dataset(self._need(DATASET, "gen-data"))

    def splits(self):
        from viewacq.synthstudy import load_split

        st = self.dataset()
        sp = load_split(self._need(SPLIT, "split"))
        return st.select_ids(sp.train), st.select_ids(sp.val), st.select_ids(sp.test)

    def model(self):
        from viewacq.diagnostics import DiagnosticModel

        return DiagnosticModel.load(self._need(DIAG, "train-diag"))

    def tables(self):
        if self._tables is None:
            from viewacq.env import SubsetOutcomes

            model = self.model()
            t0 = time.time()
            self._tables = [SubsetOutcomes.build(model, s) for s in self.splits()]
            log.info("subset tables built in %.1fs", time.time() - t0)
        return self._tables

    def _need(self, name: str, producer: str) -> Path:
        path = self.out / name
        if not path.exists():
            from viewacq.errors import DataFormatError

            raise DataFormatError(f"{path} missing; run `viewacq {producer}` first")
        return path

    def emit(self, reports, title: str = "") -> None:
        from viewacq.metrics import render_table, write_records

        write_records(reports, self.out / METRICS)
        print(render_table(reports, title))


def cmd_gen_data(ctx: Context) -> None:
    from viewacq.synthstudy import generate_dataset, save_dataset

    gen = ctx.cfg.data
    if ctx.args.n_patients is not None:
        gen = gen.replace(n_patients=ctx.args.n_patients)
    if ctx.args.noise_std is not None:
        gen = gen.replace(noise_std=ctx.args.noise_std)
    st = generate_dataset(gen)
    save_dataset(st, ctx.out / DATASET)
    print(f"wrote {len(st)} studies to {ctx.out / DATASET}")


def cmd_split(ctx: Context) -> None:
    from viewacq.synthstudy import save_split, split_dataset

    sc = ctx.cfg.split
    sp = split_dataset(ctx.dataset(), sc.ratios, sc.seed)
    save_split(sp, ctx.out / SPLIT, sc.seed, sc.ratios)
    print(f"split {len(sp.train)}/{len(sp.val)}/{len(sp.test)} written to {ctx.out / SPLIT}")


def cmd_train_diag(ctx: Context) -> None:
    import dataclasses

    from viewacq.diagnostics import evaluate_full, train_diagnostic

    tr, va, te = ctx.splits()
    enc = dataclasses.replace(ctx.cfg.encoder, n_views=tr.n_views, embed_dim=tr.embed_dim)
    hist: list = []
    model = train_diagnostic(tr, va, enc, ctx.cfg.diag_train, history=hist)
    model.save(ctx.out / DIAG)
    with open(ctx.out / "diag_history.jsonl", "w") as fh:
        for rec in hist:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    res = evaluate_full(model, va)
    print(f"diagnostic model saved to {ctx.out / DIAG}; validation mean bACC {100 * res['mean_bacc']:.2f}")


def _ppo_cfg(ctx: Context, seed: int | None = None):
    import dataclasses

    ppo = ctx.cfg.ppo
    cap = getattr(ctx.args, "max_acquisitions", None)
    if cap is not None:
        ppo = dataclasses.replace(ppo, max_acquisitions=cap)
    if seed is not None:
        ppo = dataclasses.replace(ppo, seed=seed)
    return ppo


def cmd_train_policy(ctx: Context) -> None:
    from viewacq.selector import train_selector

    tr, va, _ = ctx.tables()
    ppo = _ppo_cfg(ctx)
    hist: list = []
    nets = train_selector(tr, va, ctx.lam, ppo, history=hist)
    path = policy_path(ctx.out, ctx.lam, ppo.seed)
    nets.save(path, extra={"cost_lambda": ctx.lam, "ppo": ppo.to_dict(), "config_hash": ctx.cfg.hash})
    with open(path.with_suffix(".history.jsonl"), "w") as fh:
        for rec in hist:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"policy saved to {path}")


def _load_policy(ctx: Context):
    from viewacq.selector import PolicyNets

    path = policy_path(ctx.out, ctx.lam, ctx.cfg.ppo.seed)
    if not path.exists():
        from viewacq.errors import DataFormatError

        raise DataFormatError(f"{path} missing; run `viewacq train-policy --lambda {ctx.lam:g}` first")
    return PolicyNets.load(path)


def _rl_eval(ctx: Context):
    from viewacq.env import write_traces
    from viewacq.evaluation import eval_rl

    _, _, te = ctx.tables()
    nets = _load_policy(ctx)
    greedy = not (getattr(ctx.args, "stochastic", False) or ctx.cfg.eval.stochastic)
    rep, traces = eval_rl(te, nets, ctx.lam, max_acquisitions=_ppo_cfg(ctx).max_acquisitions, greedy=greedy,
                          seed=ctx.cfg.ppo.seed, config_hash=ctx.cfg.hash)
    rep.seed = ctx.cfg.ppo.seed
    write_traces(traces, ctx.out / f"traces_l{lam_tag(ctx.lam)}_s{ctx.cfg.ppo.seed}.jsonl")
    return rep, traces


def cmd_eval(ctx: Context) -> None:
    from viewacq.errors import ConfigError
    from viewacq.evaluation import eval_full, eval_popwise_k, eval_random_k

    method, k = ctx.args.method, ctx.args.k
    if method in ("random", "popwise") and k is None:
        raise ConfigError(f"--k is required for --method {method}")
    _, va, te = ctx.tables()
    h = ctx.cfg.hash
    if method == "full":
        rep = eval_full(te, config_hash=h)
    elif method == "random":
        rep = eval_random_k(te, k, ctx.cfg.eval.n_runs, seed=ctx.cfg.ppo.seed, config_hash=h)
    elif method == "popwise":
        rep = eval_popwise_k(va, te, k, config_hash=h)
    else:
        rep, _ = _rl_eval(ctx)
    ctx.emit([rep], f"test split, {rep.n_studies} studies")


def cmd_sweep(ctx: Context) -> None:
    from viewacq.evaluation import sweep_lambda
    from viewacq.metrics import write_records

    lambdas = ctx.args.lambdas or list(ctx.cfg.eval.lambdas)
    seeds = ctx.args.seeds or list(ctx.cfg.eval.seeds)
    tr, va, te = ctx.tables()
    n_jobs = 1 if ctx.args.deterministic else (ctx.args.threads or 1)
    runs, rows = sweep_lambda(tr, va, te, lambdas, seeds, _ppo_cfg(ctx), config_hash=ctx.cfg.hash, n_jobs=n_jobs)
    write_records(runs, ctx.out / "sweep_runs.jsonl", mode="w")
    write_records(rows, ctx.out / "sweep.jsonl", mode="w")
    ctx.emit(rows, f"lambda sweep, mean ± std over seeds {seeds}")


def cmd_pathways(ctx: Context) -> None:
    from viewacq.pathways import build_pathway_tree

    rep, traces = _rl_eval(ctx)
    tree = build_pathway_tree(traces)
    problems = tree.check_flow()
    stem = ctx.out / f"pathways_l{lam_tag(ctx.lam)}_s{ctx.cfg.ppo.seed}"
    stem.with_suffix(".json").write_text(tree.to_json() + "\n")
    stem.with_suffix(".dot").write_text(tree.to_dot(min_count=ctx.args.min_count))
    if problems:
        from viewacq.errors import NumericalError

        raise NumericalError("pathway flow check failed: " + "; ".join(problems[:5]))
    print(f"{len(tree.nodes)} nodes, {len(tree.edges)} edges; written to {stem}.json and {stem}.dot")


def cmd_oracle_check(ctx: Context) -> None:
    import numpy as np

    from viewacq.metrics import balanced_accuracy
    from viewacq.oracle import bayes_predictions, hindsight_best_batch

    _, _, te = ctx.tables()
    st = te.studies
    gen = st.config or ctx.cfg.data
    full = np.ones((len(st), st.n_views), dtype=bool)
    pa, pe, _ = bayes_predictions(st, full, gen)
    oracle = 50 * (balanced_accuracy(pa, st.y_as_class, gen.n_as_classes) + balanced_accuracy(pe, st.ef_category, 3))
    rows = np.arange(len(te))
    code = 2 ** te.n_views - 1
    model = 50 * (balanced_accuracy(te.pred_as[rows, code], st.y_as_class, te.probs.shape[2])
                  + balanced_accuracy(te.pred_ef[rows, code], st.ef_category, 3))
    _, hind = hindsight_best_batch(te, ctx.lam)
    out = {"bayes_full_mean_bacc": oracle, "model_full_mean_bacc": model, "gap": oracle - model,
           "cost_lambda": ctx.lam, "hindsight_mean_reward": float(hind.mean()), "config_hash": ctx.cfg.hash}
    if policy_path(ctx.out, ctx.lam, ctx.cfg.ppo.seed).exists():
        rep, _ = _rl_eval(ctx)
        out["rl_mean_reward"] = rep.mean_reward
        out["hindsight_dominates"] = bool(hind.mean() >= rep.mean_reward)
    with open(ctx.out / "oracle_check.jsonl", "a") as fh:
        fh.write(json.dumps(out, sort_keys=True) + "\n")
    for key, val in out.items():
        print(f"{key:24s} {val:.3f}" if isinstance(val, float) else f"{key:24s} {val}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train-diag": cmd_train_diag,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "sweep-lambda": cmd_sweep,
    "pathways": cmd_pathways,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_threads(args.threads, args.deterministic)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from viewacq.errors import ConfigError, DataFormatError, NumericalError, ShapeError

    try:
        COMMANDS[args.command](Context(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
