import json
from itertools import combinations

import numpy as np
import pytest

from viewacq.env import EpisodeTrace
from viewacq.errors import ConfigError
from viewacq.evaluation import (
    best_popwise_subset,
    eval_full,
    eval_popwise_k,
    eval_random_k,
    eval_rl,
    popwise_scores,
    random_k_codes,
    report_for_codes,
    sweep_lambda,
)
from viewacq.oracle import bayes_subset_outcomes
from viewacq.pathways import build_pathway_tree
from viewacq.selector import PolicyNets, PPOConfig
from viewacq.synthstudy import GeneratorConfig, generate_dataset


@pytest.fixture(scope="module")
def tables():
    cfg = GeneratorConfig(n_patients=1200, seed=21)
    st = generate_dataset(cfg)
    val, test = st.take(np.arange(600)), st.take(np.arange(600, 1200))
    return bayes_subset_outcomes(val, cfg), bayes_subset_outcomes(test, cfg)


class ForcedPolicy(PolicyNets):
    """Argmax picks the lowest legal action index when ``stop_first`` is False, else Stop."""

    def __init__(self, n_views, embed_dim, stop_first):
        super().__init__(n_views, embed_dim, hidden=4)
        self.stop_first = stop_first

    def logits(self, obs, legal):
        base = np.where(legal, -np.arange(legal.shape[1], dtype=float), -np.inf)
        if self.stop_first:
            base[:, -1] = 1.0
        return base

    def act_batch(self, obs, legal, rng=None, greedy=False):
        a = self.logits(obs, legal).argmax(axis=1)
        return a, np.zeros(len(a)), np.zeros(len(a))


class TestBaselines:
    def test_random_k_codes_have_k_bits(self):
        codes = random_k_codes(np.random.default_rng(0), 500, 5, 3)
        bits = (codes[:, None] >> np.arange(5)) & 1
        np.testing.assert_array_equal(bits.sum(axis=1), 3)
        assert len(np.unique(codes)) == 10

    def test_random_full_equals_full(self, tables):
        _, te = tables
        full, rnd = eval_full(te), eval_random_k(te, 5)
        assert rnd.mean_bacc == full.mean_bacc
        assert rnd.bmae_ef == full.bmae_ef
        assert all(v == 0 for v in rnd.std.values())

    def test_popwise_full_equals_full(self, tables):
        va, te = tables
        assert eval_popwise_k(va, te, 5).mean_bacc == eval_full(te).mean_bacc

    def test_popwise_enumerates_all(self, tables):
        va, _ = tables
        scores = popwise_scores(va, 2)
        assert [s for s, _ in scores] == list(combinations(range(5), 2))
        best = best_popwise_subset(va, 2)
        assert dict(scores)[best] == max(v for _, v in scores)

    def test_random_trend(self, tables):
        _, te = tables
        assert eval_random_k(te, 4).mean_bacc >= eval_random_k(te, 1).mean_bacc

    def test_random_dispersion(self, tables):
        _, te = tables
        rep = eval_random_k(te, 2, n_runs=5, seed=3)
        assert rep.std["mean_bacc"] > 0
        assert rep.mean_count == 2 and rep.acq_ratio == 40.0

    def test_k_range(self, tables):
        va, te = tables
        for k in (0, 6):
            with pytest.raises(ConfigError):
                eval_random_k(te, k)
            with pytest.raises(ConfigError):
                eval_popwise_k(va, te, k)

    def test_ratio_is_count_over_n(self, tables):
        _, te = tables
        codes = np.random.default_rng(1).integers(0, 32, len(te))
        rep = report_for_codes(te, codes, "x")
        assert rep.acq_ratio == pytest.approx(100 * rep.mean_count / 5)


class TestRL:
    def test_stop_immediately(self, tables):
        _, te = tables
        rep, traces = eval_rl(te, ForcedPolicy(5, 32, True), 0.1)
        assert rep.acq_ratio == 0 and rep.mean_count == 0
        assert rep.bacc_as == pytest.approx(100 / 3)
        assert rep.bacc_ef == pytest.approx(100 / 3)
        assert all(t.actions == [5] for t in traces)

    def test_acquire_all(self, tables):
        _, te = tables
        rep, traces = eval_rl(te, ForcedPolicy(5, 32, False), 0.0)
        full = eval_full(te)
        assert rep.acq_ratio == 100 and rep.mean_count == 5
        assert rep.mean_bacc == full.mean_bacc
        assert all(t.actions == [0, 1, 2, 3, 4, 5] and not t.forced for t in traces)

    def test_traces_match_report(self, tables):
        _, te = tables
        nets = PolicyNets(5, 32, seed=4)
        rep, traces = eval_rl(te, nets, 0.05)
        assert len(traces) == len(te)
        assert np.mean([t.n_acquired for t in traces]) == pytest.approx(rep.mean_count)
        assert np.mean([t.sparse_reward for t in traces]) == pytest.approx(rep.mean_reward)
        tr = traces[0]
        assert EpisodeTrace.from_json(tr.to_json()) == tr
        assert np.isclose(np.sum(tr.final_pmf), 1.0)

    def test_budget_cap(self, tables):
        _, te = tables
        rep, traces = eval_rl(te, ForcedPolicy(5, 32, False), 0.0, max_acquisitions=2)
        assert rep.mean_count == 2
        assert all(t.acquired == [0, 1] for t in traces)


class TestSweep:
    def test_shape_and_wo_rl_row(self, tables):
        va, te = tables
        cfg = PPOConfig(epochs=1, episodes_per_epoch=64)
        runs, rows = sweep_lambda(va, va, te, [0.01, 0.5], [0, 1], cfg)
        assert len(runs) == 4
        assert [r.method for r in rows] == ["w/o RL", "rl", "rl"]
        assert rows[0].acq_ratio == 100 and rows[0].mean_count == 5
        assert [r.cost_lambda for r in rows[1:]] == [0.01, 0.5]
        assert rows[1].extra["seeds"] == [0, 1]


class TestPathways:
    def trace(self, acquired, pa=0, pe=0, ya=0, ye=0.3):
        return EpisodeTrace(0, list(acquired) + [5], [0.0] * len(acquired), 0.0, [], pa, pe, 0.3, ya, ye)

    def test_single_chain(self):
        tree = build_pathway_tree([self.trace([2, 0]) for _ in range(7)])
        assert tree.nodes[()].reaching == 7
        assert set(tree.nodes) == {(), (2,), (0, 2)}
        assert tree.nodes[(0, 2)].terminating == 7
        assert tree.edges == {((), 2): 7, ((2,), 0): 7}
        assert tree.check_flow() == []

    def test_order_collapsed_in_nodes(self):
        tree = build_pathway_tree([self.trace([0, 1]), self.trace([1, 0]), self.trace([])])
        assert tree.nodes[(0, 1)].reaching == 2
        assert tree.edges[((0,), 1)] == 1 and tree.edges[((1,), 0)] == 1
        assert sum(tree.children(()).values()) == 3 - tree.nodes[()].terminating
        assert tree.check_flow() == []

    def test_terminal_baccs(self):
        traces = [self.trace([1], pa=0, ya=0), self.trace([1], pa=1, ya=2)]
        node = build_pathway_tree(traces).nodes[(1,)]
        assert node.bacc_as == pytest.approx(0.5)
        assert node.bacc_ef == 1.0

    def test_rl_traces_conserve_flow(self, tables):
        _, te = tables
        _, traces = eval_rl(te, PolicyNets(5, 32, seed=9), 0.01)
        tree = build_pathway_tree(traces)
        assert tree.check_flow() == []
        assert sum(n.terminating for n in tree.nodes.values()) == len(te)

    def test_flow_check_detects_damage(self):
        tree = build_pathway_tree([self.trace([3]) for _ in range(4)])
        tree.edges[((), 3)] = 5
        assert tree.check_flow()

    def test_exports(self):
        tree = build_pathway_tree([self.trace([2, 0]), self.trace([4])])
        dot = tree.to_dot(["AP2", "AP3", "AP4", "PLAX", "PSAX"])
        assert dot.startswith("digraph") and "AP4 (1)" in dot
        doc = json.loads(tree.to_json())
        assert doc["n_studies"] == 2
        assert sum(n["terminating"] for n in doc["nodes"]) == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            build_pathway_tree([])
