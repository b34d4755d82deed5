"""Estimation and classification performance for the validation study.

Counts on the validation side are labeled positive when nonzero; predicted
counts become labels through a fixed threshold (0.5 by default). AUC uses
the rank statistic with midrank tie handling. Cells missing from a side
(random splitting) are excluded from every denominator and surfaced via
n_missing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def mse(estimates, truth, mask: Optional[np.ndarray] = None) -> float:
    """Mean squared difference over evaluated cells."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise DataError("shape mismatch")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        est, tru = est[keep], tru[keep]
    if est.size == 0:
        raise DataError("no overlap")
    return float(np.mean((est - tru) ** 2))


def pearson_correlation(x, y) -> float:
    """Product-moment correlation of two paired vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise DataError("need at least two paired values")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        raise DataError("zero variance")
    return float((xc * yc).sum() / denom)


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float, float]]]:
    """AUC via the Mann-Whitney rank statistic plus the full ROC curve.

    Curve points are (fpr, tpr, threshold) for thresholds at every
    distinct score, descending, starting from (0, 0, inf).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise DataError("shape mismatch")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("degenerate labels")

    ranks = rankdata(scores)  # midranks for ties
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.append(distinct, scores.size - 1)
    curve = [(0.0, 0.0, float("inf"))]
    curve.extend(
        (float(fp[i] / n_neg), float(tp[i] / n_pos), float(sorted_scores[i])) for i in idx
    )
    return float(auc), curve


@dataclass(frozen=True)
class MetricSet:
    """Everything the validation harness reports for one run."""

    mse: float
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    n_evaluated: int
    n_missing: int
    f1_degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "mse": self.mse,
            "auc": self.auc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "f1": self.f1,
            "n_evaluated": self.n_evaluated,
            "n_missing": self.n_missing,
            "f1_degenerate": self.f1_degenerate,
        }


def classification_metrics(
    predicted_counts,
    observed_counts,
    threshold: float = 0.5,
    mask: Optional[np.ndarray] = None,
    n_missing: int = 0,
) -> MetricSet:
    """Confusion-matrix metrics plus MSE and AUC for one validation side.

    Observed label: count > 0. Predicted label: predicted >= threshold.
    Ratios with empty denominators come back as 0 (f1_degenerate marks a
    zero F1 denominator).
    """
    pred = np.asarray(predicted_counts, dtype=np.float64)
    obs = np.asarray(observed_counts, dtype=np.float64)
    if pred.shape != obs.shape:
        raise DataError("shape mismatch")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        n_missing = n_missing + int((~keep).sum())
        pred, obs = pred[keep], obs[keep]
    if pred.size == 0:
        raise DataError("empty validation side")

    labels = obs > 0
    calls = pred >= threshold
    tp = int((calls & labels).sum())
    tn = int((~calls & ~labels).sum())
    fp = int((calls & ~labels).sum())
    fn = int((~calls & labels).sum())

    def ratio(num, den):
        return num / den if den > 0 else 0.0

    sensitivity = ratio(tp, tp + fn)
    specificity = ratio(tn, tn + fp)
    precision = ratio(tp, tp + fp)
    f1_den = precision + sensitivity
    f1 = 2.0 * precision * sensitivity / f1_den if f1_den > 0 else 0.0
    auc, _ = roc_auc(pred, labels)
    return MetricSet(
        mse=float(np.mean((pred - obs) ** 2)),
        auc=auc,
        accuracy=ratio(tp + tn, pred.size),
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        f1=f1,
        n_evaluated=int(pred.size),
        n_missing=int(n_missing),
        f1_degenerate=bool(f1_den == 0),
    )
