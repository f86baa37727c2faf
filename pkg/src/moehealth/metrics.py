"""AUROC (rank statistic with midranks) and F1."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ShapeError(f"scores{s.shape} and labels{y.shape} must be equal-length vectors")
    if s.size == 0:
        raise ShapeError("empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ShapeError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """P(score of random positive > score of random negative), ties counted 1/2.

    Raises UndefinedMetricError when only one class is present.
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined for a single-class batch")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_or_none(scores, labels):
    try:
        return auroc(scores, labels)
    except UndefinedMetricError:
        return None


def f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of ``score >= threshold`` against labels; 0 when precision + recall = 0."""
    s, y = _validate(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
