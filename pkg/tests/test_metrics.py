import json

import numpy as np
import pytest

from viewacq.metrics import (
    MetricsReport,
    average_reports,
    balanced_accuracy,
    bmae,
    config_hash,
    confusion_matrix,
    make_report,
    render_table,
    weighted_f1,
    write_records,
)


class TestBalancedAccuracy:
    def test_perfect(self):
        y = np.array([0, 1, 2, 2, 1, 0])
        assert balanced_accuracy(y, y, 3) == 1.0

    def test_constant_predictor(self):
        y = np.repeat([0, 1, 2], 10)
        assert balanced_accuracy(np.zeros(30, int), y, 3) == pytest.approx(1 / 3)

    def test_recalls_one_half_zero(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        preds = np.array([0, 0, 1, 0, 0, 1])
        assert balanced_accuracy(preds, labels, 3) == pytest.approx(0.5)

    def test_absent_class_excluded(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 2, 1, 1])
        assert balanced_accuracy(preds, labels, 3) == pytest.approx(0.75)

    def test_empty(self):
        with pytest.raises(ValueError):
            balanced_accuracy([], [], 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            balanced_accuracy([0, 1], [0], 3)

    def test_uniform_random_is_chance(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1, 2], 3334)[:10_000]
        assert abs(balanced_accuracy(rng.integers(0, 3, 10_000), labels, 3) - 1 / 3) < 0.02

    def test_confusion_matrix_layout(self):
        cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
        np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])


class TestWeightedF1:
    def test_perfect(self):
        y = np.array([0, 1, 2, 1])
        assert weighted_f1(y, y, 3) == 1.0

    def test_all_class_zero(self):
        y = np.repeat([0, 1, 2], 5)
        assert weighted_f1(np.zeros(15, int), y, 3) == pytest.approx(1 / 6)

    def test_one_error_in_hundred(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 3, 100)
        p = y.copy()
        p[7] = (p[7] + 1) % 3
        assert weighted_f1(p, y, 3) > 0.98

    def test_empty(self):
        with pytest.raises(ValueError):
            weighted_f1([], [], 3)


class TestBMAE:
    def test_exact(self):
        y = np.array([0.3, 0.45, 0.6])
        assert bmae(y, y) == 0.0

    def test_category_means(self):
        true = np.array([0.30, 0.30, 0.45, 0.60, 0.60])
        pred = true + np.array([0.04, -0.04, 0.06, 0.08, -0.08])
        assert bmae(pred, true) == pytest.approx(6.0)

    def test_macro_not_micro(self):
        true = np.array([0.3] * 9 + [0.6])
        pred = true + np.array([0.01] * 9 + [0.11])
        assert bmae(pred, true) == pytest.approx(6.0)

    def test_single_group(self):
        true = np.linspace(0.55, 0.9, 20)
        assert bmae(true - 0.05, true) == pytest.approx(5.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            bmae([], [])


def report(**kw):
    rng = np.random.default_rng(kw.pop("seed", 0))
    y_as = rng.integers(0, 3, 60)
    y_ef = rng.uniform(0.2, 0.8, 60)
    counts = kw.pop("counts", rng.integers(0, 6, 60))
    return make_report("m", rng.integers(0, 3, 60), rng.integers(0, 3, 60), y_ef + 0.01, y_as, y_ef, counts, 5, **kw)


class TestReport:
    def test_invariants(self):
        r = report()
        assert r.mean_bacc == pytest.approx(0.5 * (r.bacc_as + r.bacc_ef))
        assert r.acq_ratio == pytest.approx(100 * r.mean_count / 5)
        for v in (r.bacc_as, r.bacc_ef, r.f1_as, r.f1_ef, r.acq_ratio):
            assert 0 <= v <= 100
        assert r.bmae_ef == pytest.approx(1.0)

    def test_average(self):
        reps = [report(seed=s, cost_lambda=0.1) for s in range(3)]
        avg = average_reports(reps)
        assert avg.bacc_as == pytest.approx(np.mean([r.bacc_as for r in reps]))
        assert avg.std["bacc_as"] == pytest.approx(np.std([r.bacc_as for r in reps]))
        assert avg.acq_ratio == pytest.approx(100 * avg.mean_count / 5)
        assert avg.cost_lambda == 0.1

    def test_records_roundtrip(self, tmp_path):
        r = report(seed=2, config_hash="abc")
        write_records([r, r], tmp_path / "m.jsonl")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["config_hash"] == "abc"
        assert "bmae_definition" in rec
        assert MetricsReport(**{k: v for k, v in rec.items() if k in MetricsReport.__dataclass_fields__}) == r

    def test_table(self):
        text = render_table([report(), report(seed=1)], "title")
        assert text.splitlines()[0] == "title"
        assert "mean bACC" in text and "count" in text

    def test_config_hash_stable(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
