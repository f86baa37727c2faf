"""Task loss, expert-usage statistics and the load-balancing regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .errors import NonFiniteError, ShapeError
from .moe import RoutingDecision

BCE_EPS = 1e-7
CV_GUARD = 1e-12


@dataclass
class UsageStats:
    f: np.ndarray  # selection counts per expert
    p: np.ndarray  # batch-mean gate distribution


def bce_loss(predictions, labels, eps: float = BCE_EPS) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeError(f"bce: predictions{p.shape} vs labels{y.shape}")
    if p.size == 0:
        raise ShapeError("bce of an empty batch")
    pc = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def usage_stats(decisions: Sequence[RoutingDecision], gates: Sequence) -> UsageStats:
    if len(decisions) != len(gates) or not decisions:
        raise ShapeError(f"usage_stats needs equal nonempty lists, got {len(decisions)} and {len(gates)}")
    gates = [np.asarray(g, dtype=np.float64) for g in gates]
    K = gates[0].shape[0]
    if any(g.shape != (K,) for g in gates):
        raise ShapeError("gate distributions have inconsistent expert counts")
    f = np.zeros(K)
    for d in decisions:
        if any(i >= K for i in d.indices):
            raise ShapeError(f"routing decision selects an expert index >= K={K}")
        f[list(d.indices)] += 1
    return UsageStats(f, np.mean(gates, axis=0))


def coefficient_of_variation(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    mu = float(x.mean())
    if mu <= CV_GUARD:
        return 0.0
    return math.sqrt(float(np.mean((x - mu) ** 2))) / mu


def load_balance_loss(stats: UsageStats, alpha: float) -> float:
    """alpha * CV(f * p), population standard deviation."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return 0.0
    return alpha * coefficient_of_variation(stats.f * stats.p)


def composite_loss(task_loss: float, balance_loss: float) -> float:
    if not (math.isfinite(task_loss) and math.isfinite(balance_loss)):
        raise NonFiniteError("composite loss terms must be finite")
    return task_loss + balance_loss


# ---------------------------------------------------------------------------
# Tape versions
# ---------------------------------------------------------------------------


def balance_loss_node(f: np.ndarray, gates: dc.Node, alpha: float) -> dc.Node:
    """alpha * CV(f * mean_rows(gates)); f is a constant, gradient flows through the gates."""
    p = dc.mean_axis(gates, 0)
    fp = dc.mul(gates.tape.constant(f), p)
    return dc.scale(dc.coefficient_of_variation(fp, CV_GUARD), alpha)
