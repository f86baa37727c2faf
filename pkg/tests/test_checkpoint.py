import json

import numpy as np
import pytest
from conftest import make_batch, tiny_model_config

from moehealth.checkpoint import checkpoint_digest, load_checkpoint, write_checkpoint
from moehealth.config import TrainConfig
from moehealth.errors import DataValidationError, ShapeError
from moehealth.model import MoEHealthModel


@pytest.fixture
def model_and_config():
    cfg = TrainConfig(model=tiny_model_config(), seed=3, ablation_mode="top1")
    model = MoEHealthModel(cfg.model, ["E", "EI", "ETI"], seed=3)
    rng = np.random.default_rng(0)
    for p in model.store:
        p.values += rng.normal(scale=1e-3, size=p.shape)  # not reproducible from the seed alone
    return model, cfg


def test_round_trip_is_exact(tmp_path, model_and_config, rng):
    model, cfg = model_and_config
    path = tmp_path / "ckpt.json"
    digest = write_checkpoint(path, model, cfg, {"note": "x"})
    loaded, cfg2, meta = load_checkpoint(path)
    assert digest == model.store.digest() == loaded.store.digest() == checkpoint_digest(path)
    assert loaded.pool == model.pool
    assert cfg2.to_dict() == cfg.to_dict() and meta == {"note": "x"}
    batch = make_batch(rng, ["E", "ETI", "TI"], cfg.model)
    assert np.array_equal(model.predict(batch, 2)[0], loaded.predict(batch, 2)[0])
    assert not (tmp_path / "ckpt.json.tmp").exists()


def test_document_is_versioned_text(tmp_path, model_and_config):
    model, cfg = model_and_config
    path = tmp_path / "ckpt.json"
    write_checkpoint(path, model, cfg)
    doc = json.loads(path.read_text())
    assert doc["format"] == "moehealth-checkpoint" and doc["version"] == 1
    entry = doc["parameters"]["gate.out.W"]
    assert entry["shape"] == [3, 5] and len(entry["values"]) == 15


def test_rejects_foreign_or_mismatched_files(tmp_path, model_and_config):
    model, cfg = model_and_config
    path = tmp_path / "ckpt.json"
    write_checkpoint(path, model, cfg)
    doc = json.loads(path.read_text())
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**doc, "version": 99}))
    with pytest.raises(DataValidationError):
        load_checkpoint(bad)
    bad.write_text("{not json")
    with pytest.raises(DataValidationError):
        load_checkpoint(bad)
    doc["parameters"].pop("gate.out.b")
    bad.write_text(json.dumps(doc))
    with pytest.raises(ShapeError):
        load_checkpoint(bad)
