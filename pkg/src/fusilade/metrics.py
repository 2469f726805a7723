"""Binary-classification metrics: confusion counts, accuracy, F1, MCC, PR-AUC.

All functions are pure. Zero-denominator conventions: F1 and MCC are 0 when
their denominators vanish. The PR-AUC estimator is average precision (step
integration); a trapezoid variant sits behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    f1: float
    mcc: float
    pr_auc: float
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "mcc": self.mcc,
            "pr_auc": self.pr_auc,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp,
                       "tn": self.counts.tn, "fn": self.counts.fn},
        }


def _check_pair(y_true, p_pred):
    y = np.asarray(y_true)
    p = np.asarray(p_pred, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"labels {y.shape} and predictions {p.shape} must be equal-length vectors")
    if y.size < 1:
        raise ValueError("need at least one sample")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise ValueError("predictions must lie in [0, 1]")
    return y.astype(np.int64), p


def confusion(y_true, p_pred, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with predicted-positive iff p >= threshold; positive class is label 1."""
    y, p = _check_pair(y_true, p_pred)
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def classification_metrics(c: ConfusionCounts) -> tuple[float, float, float]:
    """(accuracy, f1, mcc) from confusion counts."""
    total = c.total
    if total <= 0:
        raise ValueError("confusion counts are empty")
    accuracy = (c.tp + c.tn) / total
    f1_den = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / f1_den if f1_den > 0 else 0.0
    mcc_den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if mcc_den > 0:
        mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(mcc_den)
    else:
        mcc = 0.0
    return accuracy, f1, mcc


def pr_auc(y_true, p_pred, method: str = "average_precision") -> float:
    """Area under the precision-recall curve.

    Default is average precision: rank by descending score (ties broken by
    original index) and sum precision at each consumed positive times the
    recall step. ``method="trapezoid"`` integrates the linearly interpolated
    curve instead (known to read higher).
    """
    y, p = _check_pair(y_true, p_pred)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("PR undefined: no positive samples")
    order = np.lexsort((np.arange(y.size), -p))
    y_sorted = y[order]
    tp_cum = np.cumsum(y_sorted)
    ranks = np.arange(1, y.size + 1)
    precision = tp_cum / ranks
    recall = tp_cum / n_pos
    if method == "average_precision":
        # recall increases by 1/n_pos exactly where a positive is consumed
        return float(np.sum(precision[y_sorted == 1]) / n_pos)
    if method == "trapezoid":
        r = np.concatenate(([0.0], recall))
        pr = np.concatenate(([1.0], precision))
        return float(np.trapezoid(pr, r))
    raise ValueError(f"unknown pr_auc method {method!r}")


def evaluate_predictions(y_true, p_pred, threshold: float = 0.5) -> MetricSet:
    c = confusion(y_true, p_pred, threshold)
    accuracy, f1, mcc = classification_metrics(c)
    return MetricSet(accuracy=accuracy, f1=f1, mcc=mcc,
                     pr_auc=pr_auc(y_true, p_pred), counts=c)


METRIC_NAMES = ("accuracy", "f1", "mcc", "pr_auc")


@dataclass(frozen=True)
class FoldAggregate:
    mean: dict
    std: dict
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {
            "mean": dict(self.mean),
            "std": dict(self.std),
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp,
                       "tn": self.counts.tn, "fn": self.counts.fn},
        }


def aggregate_folds(fold_metrics: list[MetricSet]) -> FoldAggregate:
    """Per-metric mean and population std across folds, plus summed counts."""
    if not fold_metrics:
        raise ValueError("no folds to aggregate")
    mean = {}
    std = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(m, name) for m in fold_metrics], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())  # population std
    counts = ConfusionCounts(
        tp=sum(m.counts.tp for m in fold_metrics),
        fp=sum(m.counts.fp for m in fold_metrics),
        tn=sum(m.counts.tn for m in fold_metrics),
        fn=sum(m.counts.fn for m in fold_metrics),
    )
    return FoldAggregate(mean=mean, std=std, counts=counts)
