"""The full network: encoders, fused representation, gate and expert pool."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import ParameterStore, Tape
from .encoders import assemble_batch, init_encoder_params
from .losses import balance_loss_node
from .modality import N_MODALITIES, Sample
from .moe import expert_batch, gate_batch, init_moe_params, topk_mask


@dataclass
class ForwardOutput:
    prediction: dc.Node  # (B,)
    gates: Optional[dc.Node]  # (B, K); None when gating is bypassed
    gate_values: np.ndarray  # (B, K)
    selected: np.ndarray  # (B, K) bool
    availability: np.ndarray  # (B, M) bool


class MoEHealthModel:
    """Parameters plus forward pass of the mixture-of-experts fusion network.

    ``zero_missing`` swaps the learned missingness embeddings for zeros and
    ``uniform_gating`` replaces the gate by a flat 1/K average over all
    experts; they implement two of the ablations.
    """

    def __init__(
        self,
        config: ModelConfig,
        pool: Sequence[str],
        seed: int = 0,
        visible: str = "ETI",
        zero_missing: bool = False,
        uniform_gating: bool = False,
    ):
        if not pool:
            raise ValueError("expert pool must be nonempty")
        if len(set(pool)) != len(pool):
            raise ValueError("expert pool keys must be unique")
        self.config = config
        self.pool = list(pool)
        self.visible = visible
        self.zero_missing = zero_missing
        self.uniform_gating = uniform_gating
        self.store = ParameterStore()
        rng = np.random.default_rng([seed, 0])
        init_encoder_params(self.store, config, rng)
        init_moe_params(
            self.store, self.pool, N_MODALITIES * config.d_h, config.gate_hidden, config.expert_hidden, rng
        )

    @property
    def n_experts(self) -> int:
        return len(self.pool)

    def represent(self, tape: Tape, samples: Sequence[Sample]):
        return assemble_batch(tape, self.store, self.config, samples, self.visible, self.zero_missing)

    def forward(self, tape: Tape, samples: Sequence[Sample], k: int) -> ForwardOutput:
        R, avail = self.represent(tape, samples)
        B, K = len(samples), self.n_experts
        if self.uniform_gating:
            gates = None
            gate_values = np.full((B, K), 1.0 / K)
            selected = np.ones((B, K), dtype=bool)
            weights = tape.constant(gate_values)
        else:
            gates = gate_batch(tape, self.store, R)
            gate_values = gates.value
            selected = topk_mask(gate_values, k)
            weights = dc.renormalize(gates, selected)
        experts = dc.concat([expert_batch(tape, self.store, key, R) for key in self.pool], axis=1)
        pred = dc.sum_axis(dc.mul(weights, experts), axis=1)
        return ForwardOutput(pred, gates, gate_values, selected, avail)

    def loss(self, tape: Tape, samples: Sequence[Sample], k: int, alpha: float):
        """Composite loss node (task BCE + load balance) and the forward output."""
        out = self.forward(tape, samples, k)
        labels = np.array([s.label for s in samples], dtype=np.float64)
        total = dc.binary_cross_entropy(out.prediction, labels)
        if out.gates is not None and alpha > 0:
            f = out.selected.sum(axis=0).astype(np.float64)
            total = dc.add(total, balance_loss_node(f, out.gates, alpha))
        return total, out

    def expert_loss(self, tape: Tape, samples: Sequence[Sample], key: str) -> dc.Node:
        """BCE of a single expert on ``samples`` (gate and balance term not involved)."""
        R, _ = self.represent(tape, samples)
        pred = dc.sum_axis(expert_batch(tape, self.store, key, R), axis=1)
        labels = np.array([s.label for s in samples], dtype=np.float64)
        return dc.binary_cross_entropy(pred, labels)

    def predict(self, samples: Sequence[Sample], k: int, batch_size: int = 512):
        """Forward pass without recording. Returns (probabilities, gate values, selection mask)."""
        preds, gvals, sel = [], [], []
        for start in range(0, len(samples), batch_size):
            out = self.forward(Tape(record=False), samples[start : start + batch_size], k)
            preds.append(out.prediction.value)
            gvals.append(out.gate_values)
            sel.append(out.selected)
        if not preds:
            K = self.n_experts
            return np.zeros(0), np.zeros((0, K)), np.zeros((0, K), dtype=bool)
        return np.concatenate(preds), np.concatenate(gvals), np.concatenate(sel)
