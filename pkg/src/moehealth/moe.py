"""Combination-keyed expert pool, gating network and top-k routing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tape
from .errors import DataValidationError, ShapeError
from .modality import ModalityCombination, Sample


@dataclass(frozen=True)
class RoutingDecision:
    indices: tuple[int, ...]
    weights: tuple[float, ...]


def enumerate_combinations(samples: Iterable[Sample], visible: str = "ETI") -> list[ModalityCombination]:
    """Distinct availability patterns of ``samples``, sorted by canonical key.

    Samples with no visible modality are skipped.
    """
    keys = set()
    n = 0
    for s in samples:
        n += 1
        key = "".join(c for c in s.pattern if c in visible)
        if key:
            keys.add(key)
    if n == 0:
        raise DataValidationError("cannot enumerate combinations of an empty training set")
    if not keys:
        raise DataValidationError("no sample has a visible modality")
    return [ModalityCombination(k) for k in sorted(keys)]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def expert_prefix(key: str) -> str:
    return f"expert.{key}"


def init_moe_params(
    store: ParameterStore, pool: Sequence[str], rep_dim: int, gate_hidden: int, expert_hidden: int, rng: np.random.Generator
) -> None:
    def dense(name, n_out, n_in):
        store.add(f"{name}.W", dc.glorot_uniform(rng, (n_out, n_in)))
        store.add(f"{name}.b", np.zeros(n_out))

    dense("gate.hidden", gate_hidden, rep_dim)
    dense("gate.out", len(pool), gate_hidden)
    for key in pool:
        p = expert_prefix(key)
        dense(f"{p}.l1", expert_hidden, rep_dim)
        dense(f"{p}.l2", expert_hidden, expert_hidden)
        dense(f"{p}.l3", 1, expert_hidden)


def gate_param_names(store: ParameterStore) -> list[str]:
    return [n for n in store.names() if n.startswith("gate.")]


def expert_param_names(store: ParameterStore, key: str) -> list[str]:
    prefix = expert_prefix(key) + "."
    return [n for n in store.names() if n.startswith(prefix)]


def _dense(tape, store, name, x):
    return dc.linear(x, tape.param(store[f"{name}.W"]), tape.param(store[f"{name}.b"]))


# ---------------------------------------------------------------------------
# Batched forward pieces
# ---------------------------------------------------------------------------


def gate_logits(tape: Tape, store: ParameterStore, R: dc.Node) -> dc.Node:
    W = store["gate.hidden.W"]
    if R.value.ndim != 2 or R.shape[1] != W.shape[1]:
        raise ShapeError(f"gate input {R.shape}; expected (B, {W.shape[1]})")
    return _dense(tape, store, "gate.out", dc.relu(_dense(tape, store, "gate.hidden", R)))


def gate_batch(tape: Tape, store: ParameterStore, R: dc.Node) -> dc.Node:
    """Gate distribution g = softmax(W_g ReLU(W_R R + b_R) + b_g), shape (B, K)."""
    return dc.softmax_op(gate_logits(tape, store, R), axis=1)


def expert_batch(tape: Tape, store: ParameterStore, key: str, R: dc.Node) -> dc.Node:
    """Expert probabilities in (0, 1), shape (B, 1)."""
    p = expert_prefix(key)
    h = dc.relu(_dense(tape, store, f"{p}.l1", R))
    h = dc.relu(_dense(tape, store, f"{p}.l2", h))
    return dc.sigmoid_op(_dense(tape, store, f"{p}.l3", h))


def topk_mask(g: np.ndarray, k: int) -> np.ndarray:
    """Boolean (B, K) mask of the k largest entries per row; ties go to the smaller index."""
    B, K = g.shape
    k = min(k, K)
    order = np.argsort(-g, axis=1, kind="stable")[:, :k]
    mask = np.zeros((B, K), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


# ---------------------------------------------------------------------------
# Single-sample API
# ---------------------------------------------------------------------------


def gate(R, store: ParameterStore) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 1:
        raise ShapeError(f"gate expects a single representation vector, got shape {R.shape}")
    tape = Tape(record=False)
    return gate_batch(tape, store, tape.constant(R[None])).value[0]


def route_topk(g, k: int) -> RoutingDecision:
    """Select the min(k, K) largest gate values and renormalize them to sum 1."""
    g = np.asarray(g, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    K = g.shape[0]
    if k > K:
        warnings.warn(f"top-k clamped: k={k} > K={K}", stacklevel=2)
        k = K
    idx = np.argsort(-g, kind="stable")[:k]
    sel = g[idx]
    return RoutingDecision(tuple(int(i) for i in idx), tuple(float(w) for w in sel / sel.sum()))


def fuse_predict(R, pool: Sequence[str], store: ParameterStore, k: int, uniform: bool = False):
    """Return (y_hat, RoutingDecision) for a single representation vector.

    With ``uniform=True`` the gate is bypassed and every expert gets 1/K.
    """
    if not pool:
        raise ShapeError("expert pool is empty")
    R = np.asarray(R, dtype=np.float64)
    tape = Tape(record=False)
    Rn = tape.constant(R[None])
    K = len(pool)
    if uniform:
        decision = RoutingDecision(tuple(range(K)), tuple([1.0 / K] * K))
    else:
        decision = route_topk(gate_batch(tape, store, Rn).value[0], k)
    y = 0.0
    for j, w in zip(decision.indices, decision.weights):
        y += w * float(expert_batch(tape, store, pool[j], Rn).value[0, 0])
    return y, decision
