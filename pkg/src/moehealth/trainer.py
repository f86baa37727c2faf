"""Expert pretraining, joint training with early stopping, and evaluation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._runtime import keep_large_allocations_on_heap
from .config import TrainConfig, apply_ablation
from .diffcore import OptimizerState, Tape, optimizer_step
from .encoders import encoder_param_names
from .errors import DataValidationError
from .losses import coefficient_of_variation
from .metrics import auroc_or_none, f1
from .modality import Sample, restrict_key
from .model import MoEHealthModel
from .moe import enumerate_combinations, expert_param_names, gate_param_names

log = logging.getLogger(__name__)

ScoreFn = Callable[[int, MoEHealthModel], Optional[float]]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: Optional[float]
    usage: list[int]
    param_digest: str


@dataclass
class TrainReport:
    config: dict
    pool: list[str]
    pretrain: dict[str, dict] = field(default_factory=dict)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_epoch: int = 0
    val_metrics: dict = field(default_factory=dict)
    test_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Track the best score; signal a stop after ``patience`` epochs without strict improvement.

    ``None`` scores (undefined AUROC) are skipped: they neither improve nor count.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: Optional[float]) -> bool:
        """Record ``score`` for ``epoch``; returns True when this epoch is the new best."""
        if score is None:
            return False
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def visible_subset(samples: Sequence[Sample], visible: str) -> list[Sample]:
    return [s for s in samples if restrict_key(s.pattern, visible)]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def build_model(train_samples: Sequence[Sample], config: TrainConfig) -> MoEHealthModel:
    config.validate()
    pool = [c.key for c in enumerate_combinations(train_samples, config.modalities)]
    return MoEHealthModel(
        config.model,
        pool,
        seed=config.seed,
        visible=config.modalities,
        zero_missing=config.ablation_mode == "no_missing_indicator",
        uniform_gating=config.ablation_mode == "no_dynamic_gating",
    )


def _mean_expert_loss(model: MoEHealthModel, samples: Sequence[Sample], key: str, chunk: int = 512) -> float:
    total = 0.0
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        total += float(model.expert_loss(Tape(record=False), part, key).value) * len(part)
    return total / len(samples)


def pretrain_experts(
    model: MoEHealthModel, train_samples: Sequence[Sample], config: TrainConfig, rng: np.random.Generator
) -> dict[str, dict]:
    """Train each expert alone, BCE only, on samples whose pattern is its combination.

    Experts run in pool order; the shared encoders (and missingness
    embeddings) update alongside every expert. Gate parameters are untouched.
    """
    summary: dict[str, dict] = {}
    if config.pretrain_epochs == 0:
        return summary
    shared = encoder_param_names(model.store)
    if model.zero_missing:
        shared = [n for n in shared if not n.startswith("missing.")]
    for key in model.pool:
        subset = [s for s in train_samples if restrict_key(s.pattern, model.visible) == key]
        names = shared + expert_param_names(model.store, key)
        state = OptimizerState(
            config.learning_rate, config.beta1, config.beta2, config.epsilon, config.weight_decay
        )
        before = _mean_expert_loss(model, subset, key)
        for epoch in range(config.pretrain_epochs):
            for idx in _batches(len(subset), config.batch_size, rng):
                tape = Tape()
                loss = model.expert_loss(tape, [subset[i] for i in idx], key)
                tape.backward(loss)
                optimizer_step(model.store, state, names)
        after = _mean_expert_loss(model, subset, key)
        summary[key] = {"n": len(subset), "loss_before": before, "loss_after": after}
        log.info("pretrained expert %s on %d samples: BCE %.4f -> %.4f", key, len(subset), before, after)
    return summary


def joint_trainable_names(model: MoEHealthModel) -> list[str]:
    names = model.store.names()
    if model.uniform_gating:
        gate = set(gate_param_names(model.store))
        names = [n for n in names if n not in gate]
    if model.zero_missing:
        names = [n for n in names if not n.startswith("missing.")]
    return names


def train_epoch(
    model: MoEHealthModel,
    samples: Sequence[Sample],
    config: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator,
    names: Sequence[str],
) -> tuple[float, np.ndarray]:
    """One pass of shuffled mini-batches; returns (mean batch loss, expert selection counts)."""
    total, batches = 0.0, 0
    usage = np.zeros(model.n_experts, dtype=np.int64)
    for idx in _batches(len(samples), config.batch_size, rng):
        tape = Tape()
        loss, out = model.loss(tape, [samples[i] for i in idx], config.k, config.alpha)
        tape.backward(loss)
        optimizer_step(model.store, state, names)
        total += float(loss.value)
        batches += 1
        usage += out.selected.sum(axis=0)
    return total / max(batches, 1), usage


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    config: TrainConfig,
    score_fn: Optional[ScoreFn] = None,
) -> tuple[TrainReport, MoEHealthModel]:
    """Pretrain (unless ablated), then train jointly with early stopping on validation AUROC.

    ``score_fn(epoch, model)`` overrides the validation score; the returned
    model holds the best epoch's parameters.
    """
    keep_large_allocations_on_heap()
    config = apply_ablation(config)
    train_samples = visible_subset(train_samples, config.modalities)
    val_samples = visible_subset(val_samples, config.modalities)
    test_samples = visible_subset(test_samples, config.modalities)
    for name, split in (("train", train_samples), ("validation", val_samples), ("test", test_samples)):
        if not split:
            raise DataValidationError(f"{name} split is empty")

    model = build_model(train_samples, config)
    report = TrainReport(config=config.to_dict(), pool=list(model.pool))
    rng = np.random.default_rng([config.seed, 1])

    report.pretrain = pretrain_experts(model, train_samples, config, rng)

    state = OptimizerState(config.learning_rate, config.beta1, config.beta2, config.epsilon, config.weight_decay)
    names = joint_trainable_names(model)
    stopper = EarlyStopping(config.patience)
    best = model.store.snapshot()
    val_labels = np.array([s.label for s in val_samples])
    for epoch in range(1, config.max_epochs + 1):
        loss, usage = train_epoch(model, train_samples, config, state, rng, names)
        if score_fn is not None:
            score = score_fn(epoch, model)
        else:
            preds, _, _ = model.predict(val_samples, config.k)
            score = auroc_or_none(preds, val_labels)
        if score is None:
            log.warning("epoch %d: validation AUROC undefined, skipped for early stopping", epoch)
        report.epochs.append(EpochRecord(epoch, loss, score, usage.tolist(), model.store.digest()))
        if stopper.update(epoch, score):
            best = model.store.snapshot()
        log.info("epoch %d: train loss %.5f, val AUROC %s", epoch, loss, "n/a" if score is None else f"{score:.4f}")
        report.stopped_epoch = epoch
        if stopper.should_stop:
            log.info("early stop after epoch %d (best epoch %s)", epoch, stopper.best_epoch)
            break
    model.store.load(best)
    report.best_epoch = stopper.best_epoch
    report.val_metrics = evaluate(model, val_samples, config.k)
    report.test_metrics = evaluate(model, test_samples, config.k)
    return report, model


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MOE_HEALTH_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: MoEHealthModel, samples: Sequence[Sample], k: int, threshold: float = 0.5) -> dict:
    """AUROC/F1 overall and per availability pattern, plus expert-selection counts.

    Undefined AUROC (single-class group) is reported as None.
    """
    if not samples:
        raise DataValidationError("cannot evaluate an empty split")
    threads = _threads()
    chunk = 512
    pieces = [samples[i : i + chunk] for i in range(0, len(samples), chunk)]
    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda part: model.predict(part, k), pieces))
    else:
        results = [model.predict(part, k) for part in pieces]
    preds = np.concatenate([r[0] for r in results])
    selected = np.concatenate([r[2] for r in results])
    labels = np.array([s.label for s in samples])
    by_pattern = {}
    patterns = np.array([s.pattern for s in samples])
    for key in sorted(set(patterns.tolist())):
        m = patterns == key
        by_pattern[key] = {
            "n": int(m.sum()),
            "auroc": auroc_or_none(preds[m], labels[m]),
            "f1": f1(preds[m], labels[m], threshold),
        }
    usage = selected.sum(axis=0)
    return {
        "n": len(samples),
        "auroc": auroc_or_none(preds, labels),
        "f1": f1(preds, labels, threshold),
        "by_pattern": by_pattern,
        "usage_counts": usage.tolist(),
        "usage_cv": coefficient_of_variation(usage),
    }


def gradient_buffers(model: MoEHealthModel) -> dict[str, np.ndarray]:
    return {p.name: p.gradient.copy() for p in model.store}

