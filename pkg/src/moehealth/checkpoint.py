"""Versioned text checkpoints: configuration, expert pool and every parameter."""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .config import TrainConfig
from .errors import DataValidationError, ShapeError
from .model import MoEHealthModel

FORMAT = "moehealth-checkpoint"
VERSION = 1


def checkpoint_document(model: MoEHealthModel, config: TrainConfig, meta: Optional[dict] = None) -> dict:
    params = {
        p.name: {"shape": list(p.values.shape), "values": p.values.ravel().tolist()} for p in model.store
    }
    return {
        "format": FORMAT,
        "version": VERSION,
        "meta": dict(meta or {}),
        "config": config.to_dict(),
        "pool": list(model.pool),
        "visible": model.visible,
        "zero_missing": model.zero_missing,
        "uniform_gating": model.uniform_gating,
        "parameters": params,
    }


def write_checkpoint(path, model: MoEHealthModel, config: TrainConfig, meta: Optional[dict] = None) -> str:
    """Write atomically (temp file then rename); returns the parameter digest."""
    doc = checkpoint_document(model, config, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        # repr-exact floats: json writes the shortest round-tripping decimal
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)
    return model.store.digest()


def load_checkpoint(path) -> tuple[MoEHealthModel, TrainConfig, dict]:
    """Rebuild the model saved at ``path``. Returns (model, config, meta)."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"checkpoint is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT:
        raise DataValidationError(f"not a checkpoint file (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise DataValidationError(f"unsupported checkpoint version {doc.get('version')!r}")
    config = TrainConfig.from_dict(doc["config"])
    model = MoEHealthModel(
        config.model,
        doc["pool"],
        seed=config.seed,
        visible=doc["visible"],
        zero_missing=doc["zero_missing"],
        uniform_gating=doc["uniform_gating"],
    )
    saved = doc["parameters"]
    expected = set(model.store.names())
    if set(saved) != expected:
        missing = sorted(expected - set(saved))
        extra = sorted(set(saved) - expected)
        raise ShapeError(f"checkpoint parameters do not match the model: missing {missing}, unexpected {extra}")
    state = {}
    for name, entry in saved.items():
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        state[name] = values
    model.store.load(state)
    return model, config, doc.get("meta", {})


def checkpoint_digest(path) -> str:
    """Content digest of the parameters stored in a checkpoint file."""
    model, _, _ = load_checkpoint(path)
    return model.store.digest()

