"""Finite-difference check of the full composite-loss gradient on a tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .modality import Sample
from .model import MoEHealthModel
from .moe import topk_mask

TOLERANCE = 1e-4
TIE_MARGIN = 1e-6
POOL = ("E", "ET", "ETI")
# Batch patterns: every expert's combination plus samples lacking each modality,
# so all three missingness embeddings sit on the gradient path.
PATTERNS = ("E", "ET", "ETI", "EI", "TI", "ETI", "E", "T")


@dataclass
class GradcheckReport:
    passed: bool
    max_relative_error: float
    worst_parameter: str
    errors: dict[str, float] = field(default_factory=dict)
    redraws: int = 0
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_relative_error": self.max_relative_error,
            "worst_parameter": self.worst_parameter,
            "tolerance": TOLERANCE,
            "redraws": self.redraws,
            "seconds": self.seconds,
            "errors": dict(self.errors),
        }


def tiny_config() -> ModelConfig:
    return ModelConfig(
        d_h=4,
        static_dim=3,
        series_dim=2,
        vocab_size=10,
        image_dim=5,
        rnn_hidden=3,
        static_hidden=3,
        token_dim=4,
        image_hidden=4,
        gate_hidden=5,
        expert_hidden=5,
    )


def tiny_batch(cfg: ModelConfig, rng: np.random.Generator) -> list[Sample]:
    samples = []
    for i, pattern in enumerate(PATTERNS):
        kw = {}
        if "E" in pattern:
            kw["ehr_static"] = rng.normal(size=cfg.static_dim)
            kw["ehr_series"] = rng.normal(size=(4 + i % 3, cfg.series_dim))
        if "T" in pattern:
            kw["text_tokens"] = rng.integers(0, cfg.vocab_size, size=3 + i % 2).tolist()
        if "I" in pattern:
            kw["image_features"] = rng.normal(size=cfg.image_dim)
        samples.append(Sample(f"g{i}", i % 2, **kw))
    return samples


def _perturb_biases(model: MoEHealthModel, rng: np.random.Generator) -> None:
    # zero biases leave whole ReLU layers dead and the gate exactly uniform,
    # which puts every top-k decision on a tie
    for p in model.store:
        if p.name.endswith(".b"):
            p.values[...] = rng.uniform(-0.5, 0.5, size=p.shape)


def _min_topk_gap(gates: np.ndarray, k: int) -> float:
    if k >= gates.shape[1]:
        return np.inf
    ordered = -np.sort(-gates, axis=1)
    return float(np.min(ordered[:, k - 1] - ordered[:, k]))


def run_gradcheck(seed: int = 0, k: int = 2, alpha: float = 0.5, h: float = 1e-5, max_redraws: int = 20):
    """Compare analytic and central-difference gradients for every parameter.

    A draw is rejected, and the instance redrawn, when any row's k-th and
    (k+1)-th gate values lie within TIE_MARGIN or when a finite-difference
    probe flips a routing decision; the loss is not differentiable there.
    """
    start = time.perf_counter()
    cfg = tiny_config()
    for redraw in range(max_redraws + 1):
        rng = np.random.default_rng([seed, redraw])
        samples = tiny_batch(cfg, rng)
        model = MoEHealthModel(cfg, POOL, seed=int(rng.integers(2**31)))
        _perturb_biases(model, rng)

        tape = dc.Tape()
        loss, out = model.loss(tape, samples, k, alpha)
        if _min_topk_gap(out.gate_values, k) <= TIE_MARGIN:
            continue
        base_mask = out.selected.copy()
        tape.backward(loss)
        analytic = {p.name: p.gradient.copy() for p in model.store}

        flipped = []

        def loss_fn():
            value, probe = model.loss(dc.Tape(record=False), samples, k, alpha)
            if not np.array_equal(topk_mask(probe.gate_values, k), base_mask):
                flipped.append(True)
            return float(value.value)

        numeric = dc.finite_difference_gradients(loss_fn, model.store, h=h)
        if flipped:
            continue
        errors = {name: dc.relative_error(analytic[name], numeric[name]) for name in analytic}
        worst = max(errors, key=errors.get)
        return GradcheckReport(
            passed=errors[worst] < TOLERANCE,
            max_relative_error=errors[worst],
            worst_parameter=worst,
            errors=errors,
            redraws=redraw,
            seconds=time.perf_counter() - start,
        )
    raise RuntimeError(f"no tie-free instance found in {max_redraws + 1} draws")
