"""Exact binary-classification losses used as training targets.

Every metric is exposed in loss form (lower is better) through true_loss:
MCR and EER are already error rates, all others are returned as 1 - value.
Thresholded metrics (MCR, F1, MCC, JAC) predict positive where
score >= gamma, ties counting as positive.  Ranking metrics (AUC, EER, AP)
ignore gamma and require both classes to be present.

Degenerate conventions:
  F1  -> 1 when tp = fp = fn = 0 (loss 0); 0 when tp = 0 otherwise
  JAC -> 1 when the union tp + fp + fn is empty (loss 0)
  MCC -> 0 whenever the denominator vanishes (loss 1); loss 1 - MCC in [0, 2]
  AUC, EER, AP -> UndefinedMetricError on single-class targets
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MetricId",
    "RANKING_METRICS",
    "THRESHOLDED_METRICS",
    "ConfusionCounts",
    "UndefinedMetricError",
    "confusion",
    "threshold_labels",
    "metric_value",
    "true_loss",
    "default_gamma_grid",
    "calibrate_threshold",
]


class MetricId(enum.Enum):
    """Identifier for each supported target metric."""

    MCR = "mcr"
    AUC = "auc"
    EER = "eer"
    AP = "ap"
    F1 = "f1"
    MCC = "mcc"
    JAC = "jac"


RANKING_METRICS = frozenset({MetricId.AUC, MetricId.EER, MetricId.AP})
THRESHOLDED_METRICS = frozenset({MetricId.MCR, MetricId.F1, MetricId.MCC, MetricId.JAC})


class UndefinedMetricError(ValueError):
    """Raised when a metric has no value for the given targets."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn


def _check_targets(y):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"targets must be a vector, got shape {y.shape}")
    if y.size == 0:
        raise ValueError("targets must be non-empty")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must take values in {0, 1}")
    return y.astype(np.int64)


def threshold_labels(scores, gamma):
    """Hard labels from scores: positive where score >= gamma."""
    return np.asarray(scores) >= gamma


def confusion(y, labels):
    """Confusion counts for binary targets y and boolean/0-1 labels."""
    y = _check_targets(y)
    labels = np.asarray(labels).astype(bool)
    if labels.shape != y.shape:
        raise ValueError(f"labels shape {labels.shape} does not match targets {y.shape}")
    pos = y == 1
    tp = int(np.count_nonzero(labels & pos))
    fp = int(np.count_nonzero(labels & ~pos))
    fn = int(np.count_nonzero(~labels & pos))
    tn = int(np.count_nonzero(~labels & ~pos))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _check_scores(y, scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != y.shape:
        raise ValueError(f"scores shape {scores.shape} does not match targets {y.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return scores


def average_ranks(x):
    # 1-based ranks with ties sharing the group-average rank.
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    first = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    counts = np.diff(np.r_[first, len(xs)])
    avg = first + (counts + 1) / 2.0
    ranks = np.empty(len(xs), dtype=np.float64)
    ranks[order] = np.repeat(avg, counts)
    return ranks


def _auc(y, scores):
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = average_ranks(scores)
    rank_sum = ranks[y == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _eer(y, scores):
    # Sweep all distinct score thresholds plus -inf/+inf sentinels; pick the
    # smallest threshold minimizing |FPR - FNR|; report (FPR + FNR) / 2.
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("EER needs both classes present")
    candidates = np.r_[-np.inf, np.unique(scores), np.inf]
    best = None
    for gamma in candidates:
        labels = scores >= gamma
        fp = np.count_nonzero(labels & (y == 0))
        fn = np.count_nonzero(~labels & (y == 1))
        fpr = fp / n_neg
        fnr = fn / n_pos
        key = (abs(fpr - fnr), gamma)
        if best is None or key < best[0]:
            best = (key, (fpr + fnr) / 2.0)
    return best[1]


def _average_precision(y, scores):
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("AP needs both classes present")
    # Descending scores, ties kept in original index order by the stable sort.
    order = np.argsort(-scores, kind="mergesort")
    hits = y[order] == 1
    cum_pos = np.cumsum(hits)
    k = np.arange(1, y.size + 1)
    precision_at_hits = cum_pos[hits] / k[hits]
    return float(precision_at_hits.mean())


def _f1(c):
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def _mcc(c):
    tp, fp, tn, fn = (float(v) for v in (c.tp, c.fp, c.tn, c.fn))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0.0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(denom)


def _jaccard(c):
    union = c.tp + c.fp + c.fn
    if union == 0:
        return 1.0
    return c.tp / union


def metric_value(metric, y, scores, gamma=0.0):
    """The raw metric value (higher is better except MCR and EER)."""
    y = _check_targets(y)
    scores = _check_scores(y, scores)
    if metric in RANKING_METRICS:
        if metric is MetricId.AUC:
            return float(_auc(y, scores))
        if metric is MetricId.EER:
            return float(_eer(y, scores))
        return float(_average_precision(y, scores))
    c = confusion(y, threshold_labels(scores, gamma))
    if metric is MetricId.MCR:
        return (c.fp + c.fn) / c.n
    if metric is MetricId.F1:
        return float(_f1(c))
    if metric is MetricId.MCC:
        return float(_mcc(c))
    if metric is MetricId.JAC:
        return float(_jaccard(c))
    raise ValueError(f"unknown metric {metric!r}")


def true_loss(metric, y, scores, gamma=0.0):
    """Loss form of the metric: MCR and EER as-is, otherwise 1 - value."""
    value = metric_value(metric, y, scores, gamma)
    if metric in (MetricId.MCR, MetricId.EER):
        return value
    return 1.0 - value


def default_gamma_grid(scores, size=101):
    """Evenly spaced candidate thresholds spanning [min(scores), max(scores)]."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    return np.linspace(scores.min(), scores.max(), size)


def calibrate_threshold(metric, y, scores, grid=None):
    """Grid-search the threshold minimizing the loss of a thresholded metric.

    Ties are broken toward the gamma closest to zero, then toward the
    smaller gamma.
    """
    if metric not in THRESHOLDED_METRICS:
        raise ValueError(f"{metric} does not use a threshold")
    if grid is None:
        grid = default_gamma_grid(scores)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("threshold grid must be non-empty")
    losses = np.array([true_loss(metric, y, scores, g) for g in grid])
    best = losses.min()
    ties = grid[losses == best]
    return float(min(ties, key=lambda g: (abs(g), g)))
