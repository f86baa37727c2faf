import numpy as np
import pytest

from moehealth.config import ModelConfig
from moehealth.modality import Sample


def tiny_model_config(**kw):
    base = dict(
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
    base.update(kw)
    return ModelConfig(**base)


def make_sample(rng, pattern, cfg, label=0, sid="s", series_len=4):
    kw = {}
    if "E" in pattern:
        kw["ehr_static"] = rng.normal(size=cfg.static_dim)
        kw["ehr_series"] = rng.normal(size=(series_len, cfg.series_dim))
    if "T" in pattern:
        kw["text_tokens"] = rng.integers(0, cfg.vocab_size, size=3).tolist()
    if "I" in pattern:
        kw["image_features"] = rng.normal(size=cfg.image_dim)
    return Sample(sid, label, **kw)


def make_batch(rng, patterns, cfg):
    return [make_sample(rng, p, cfg, label=i % 2, sid=f"s{i}") for i, p in enumerate(patterns)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


# one line per acceptance criterion, repeated in the terminal summary so the
# verdicts stay visible even when test output is captured
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
