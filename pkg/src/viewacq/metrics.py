"""Classification and regression metrics plus the report record shared by all evaluations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from viewacq.synthstudy import ef_category_of


def _labels(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("metrics need at least one prediction")
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape} predictions vs {labels.shape} labels")
    return preds, labels


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    preds, labels = _labels(preds, labels)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(preds, labels, n_classes: int) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    cm = confusion_matrix(preds, labels, n_classes)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def weighted_f1(preds, labels, n_classes: int) -> float:
    """Support-weighted mean of per-class F1; a class with no true or predicted members scores 0."""
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * support).sum() / support.sum())


def bmae(pred_ef, true_ef, categories=None) -> float:
    """Macro average over true EF categories of the MAE, in EF percentage points."""
    pred_ef = np.asarray(pred_ef, dtype=np.float64)
    true_ef = np.asarray(true_ef, dtype=np.float64)
    if pred_ef.size == 0:
        raise ValueError("bMAE needs at least one prediction")
    if pred_ef.shape != true_ef.shape:
        raise ValueError("prediction and target lengths differ")
    cats = ef_category_of(true_ef) if categories is None else np.asarray(categories)
    err = np.abs(pred_ef - true_ef) * 100.0
    return float(np.mean([err[cats == c].mean() for c in np.unique(cats)]))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    """Percentages for bACC, F1 and ratio; bMAE in EF points; count in views per study."""

    method: str
    bacc_as: float
    bacc_ef: float
    f1_as: float
    f1_ef: float
    bmae_ef: float
    mean_bacc: float
    acq_ratio: float
    mean_count: float
    n_studies: int
    seed: int | None = None
    config_hash: str = ""
    k: int | None = None
    cost_lambda: float | None = None
    mean_reward: float | None = None
    std: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["bmae_definition"] = "macro mean over true EF categories of |mu_EF - y_EF| in EF points"
        rec["count_unit"] = "mean acquired views per study"
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def make_report(method: str, pred_as, pred_ef, mu_ef, y_as_class, y_ef, counts, n_views: int,
                n_as_classes: int = 3, **meta) -> MetricsReport:
    ef_cat = ef_category_of(y_ef)
    b_as = 100.0 * balanced_accuracy(pred_as, y_as_class, n_as_classes)
    b_ef = 100.0 * balanced_accuracy(pred_ef, ef_cat, 3)
    count = float(np.mean(counts))
    return MetricsReport(
        method=method,
        bacc_as=b_as,
        bacc_ef=b_ef,
        f1_as=100.0 * weighted_f1(pred_as, y_as_class, n_as_classes),
        f1_ef=100.0 * weighted_f1(pred_ef, ef_cat, 3),
        bmae_ef=bmae(mu_ef, y_ef, ef_cat),
        mean_bacc=0.5 * (b_as + b_ef),
        acq_ratio=100.0 * count / n_views,
        mean_count=count,
        n_studies=int(len(y_ef)),
        **meta,
    )


_FIELDS = ("bacc_as", "bacc_ef", "f1_as", "f1_ef", "bmae_ef", "mean_bacc", "acq_ratio", "mean_count", "mean_reward")


def average_reports(reports: list[MetricsReport], method: str | None = None, **meta) -> MetricsReport:
    """Field-wise mean, with the across-run standard deviation stored in ``std``."""
    first = reports[0]
    means, std = {}, {}
    for f in _FIELDS:
        vals = [getattr(r, f) for r in reports]
        if any(v is None for v in vals):
            means[f] = None
            continue
        means[f] = float(np.mean(vals))
        std[f] = float(np.std(vals))
    # keep the invariants exact after averaging
    means["mean_bacc"] = 0.5 * (means["bacc_as"] + means["bacc_ef"])
    n_views = first.mean_count / first.acq_ratio * 100.0 if first.acq_ratio else None
    if n_views:
        means["acq_ratio"] = 100.0 * means["mean_count"] / n_views
    kw = dict(method=method or first.method, n_studies=first.n_studies, seed=first.seed,
              config_hash=first.config_hash, k=first.k, cost_lambda=first.cost_lambda, std=std)
    kw.update(meta)
    return MetricsReport(**means, **kw)


def write_records(reports, path, mode: str = "a") -> None:
    with open(path, mode) as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def render_table(reports: list[MetricsReport], title: str = "") -> str:
    head = ["method", "k", "lambda", "AS bACC", "EF bACC", "mean bACC", "AS F1", "EF F1", "bMAE", "reward",
            "ratio %", "count"]

    def fmt(r, f):
        v = getattr(r, f)
        if v is None:
            return "-"
        s = f"{v:.1f}" if f != "mean_count" and f != "mean_reward" else f"{v:.2f}"
        if f in r.std and r.std[f] > 0:
            s += f"±{r.std[f]:.1f}" if f != "mean_count" else f"±{r.std[f]:.2f}"
        return s

    rows = []
    for r in reports:
        rows.append([r.method, "-" if r.k is None else str(r.k),
                     "-" if r.cost_lambda is None else f"{r.cost_lambda:g}"]
                    + [fmt(r, f) for f in ("bacc_as", "bacc_ef", "mean_bacc", "f1_as", "f1_ef", "bmae_ef",
                                           "mean_reward", "acq_ratio", "mean_count")])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(head)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    lines.append("count = mean acquired views per study; bMAE = macro MAE over true EF categories (EF points)")
    return "\n".join(lines)
