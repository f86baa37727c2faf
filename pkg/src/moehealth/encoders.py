"""Modality encoders, missingness embeddings and fused-representation assembly.

Every encoder maps one modality to a ``d_h`` vector:

* EHR: ``Linear(concat(ReLU(Linear(static)), BiLSTM(series)))``
* text: ``ReLU(Linear(mean of token embeddings))``
* image: ``Linear(ReLU(Linear(features)))`` over precomputed feature vectors

Absent modalities are replaced by a learned ``e_absent`` vector (or zeros
when the missing indicator is ablated) and the three slots are concatenated
in canonical E, T, I order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import ParameterStore, Tape
from .errors import NonFiniteError, ShapeError
from .modality import MODALITIES, N_MODALITIES, ModalityKind, Sample


@dataclass
class FusedRepresentation:
    vector: np.ndarray
    available: tuple[bool, ...]


def missing_param_name(kind: ModalityKind, cfg: ModelConfig) -> str:
    return "missing.shared" if cfg.shared_missing else f"missing.{kind.name.lower()}"


def init_encoder_params(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    H, d = cfg.rnn_hidden, cfg.d_h

    def dense(name, n_out, n_in):
        store.add(f"{name}.W", dc.glorot_uniform(rng, (n_out, n_in)))
        store.add(f"{name}.b", np.zeros(n_out))

    dense("ehr.static", cfg.static_hidden, cfg.static_dim)
    for direction in ("fwd", "bwd"):
        store.add(f"ehr.lstm_{direction}.W_in", dc.glorot_uniform(rng, (4 * H, cfg.series_dim)))
        store.add(f"ehr.lstm_{direction}.W_rec", dc.glorot_uniform(rng, (4 * H, H)))
        store.add(f"ehr.lstm_{direction}.b", np.zeros(4 * H))
    dense("ehr.out", d, cfg.static_hidden + 2 * H)

    store.add("text.embedding", dc.glorot_uniform(rng, (cfg.vocab_size, cfg.token_dim)))
    dense("text.out", d, cfg.token_dim)

    dense("image.hidden", cfg.image_hidden, cfg.image_dim)
    dense("image.out", d, cfg.image_hidden)

    if cfg.shared_missing:
        store.add("missing.shared", dc.glorot_uniform(rng, (d,)))
    else:
        for kind in MODALITIES:
            store.add(missing_param_name(kind, cfg), dc.glorot_uniform(rng, (d,)))


def encoder_param_names(store: ParameterStore) -> list[str]:
    prefixes = ("ehr.", "text.", "image.", "missing.")
    return [n for n in store.names() if n.startswith(prefixes)]


def _dense(tape: Tape, store: ParameterStore, name: str, x: dc.Node) -> dc.Node:
    return dc.linear(x, tape.param(store[f"{name}.W"]), tape.param(store[f"{name}.b"]))


# ---------------------------------------------------------------------------
# Batched encoders (tape operations)
# ---------------------------------------------------------------------------


def ehr_embedding(tape: Tape, store: ParameterStore, static: np.ndarray, series: np.ndarray) -> dc.Node:
    """EHR embeddings for a batch: static (B, F_s), series (B, T, F_d)."""
    static = np.asarray(static, dtype=np.float64)
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3 or series.shape[1] == 0:
        raise ShapeError(f"ehr series must be (B, T >= 1, F_d), got {series.shape}")
    if not (np.all(np.isfinite(static)) and np.all(np.isfinite(series))):
        raise NonFiniteError("EHR input contains non-finite values")
    F_s = store["ehr.static.W"].shape[1]
    F_d = store["ehr.lstm_fwd.W_in"].shape[1]
    if static.ndim != 2 or static.shape[1] != F_s or series.shape[2] != F_d or series.shape[0] != static.shape[0]:
        raise ShapeError(f"ehr input static{static.shape} series{series.shape}; expected F_s={F_s}, F_d={F_d}")
    s = dc.relu(_dense(tape, store, "ehr.static", tape.constant(static)))
    lstm = [[tape.param(store[f"ehr.lstm_{d}.{w}"]) for w in ("W_in", "W_rec", "b")] for d in ("fwd", "bwd")]
    h = dc.bilstm_final(series, lstm[0], lstm[1])
    return _dense(tape, store, "ehr.out", dc.concat([s, h], axis=1))


def text_embedding(tape: Tape, store: ParameterStore, tokens: Sequence[Sequence[int]]) -> dc.Node:
    """Text embeddings for a batch of nonempty token-id lists."""
    V = store["text.embedding"].shape[0]
    for toks in tokens:
        if len(toks) == 0:
            raise ShapeError("empty token list reached the text encoder")
        if min(toks) < 0 or max(toks) >= V:
            raise ShapeError(f"token id out of vocabulary range [0, {V})")
    pooled = dc.bag_mean(tape.param(store["text.embedding"]), tokens)
    return dc.relu(_dense(tape, store, "text.out", pooled))


def image_hidden_preactivation(tape: Tape, store: ParameterStore, features: np.ndarray) -> dc.Node:
    features = np.asarray(features, dtype=np.float64)
    F_i = store["image.hidden.W"].shape[1]
    if features.ndim != 2 or features.shape[1] != F_i:
        raise ShapeError(f"image features {features.shape}; expected (B, {F_i})")
    if not np.all(np.isfinite(features)):
        raise NonFiniteError("image features contain non-finite values")
    return _dense(tape, store, "image.hidden", tape.constant(features))


def image_embedding(tape: Tape, store: ParameterStore, features: np.ndarray) -> dc.Node:
    """Image embeddings for a batch of feature vectors (B, F_i)."""
    return _dense(tape, store, "image.out", dc.relu(image_hidden_preactivation(tape, store, features)))


def assemble_batch(
    tape: Tape,
    store: ParameterStore,
    cfg: ModelConfig,
    samples: Sequence[Sample],
    visible: str = "ETI",
    zero_missing: bool = False,
) -> tuple[dc.Node, np.ndarray]:
    """Fused representation R for a batch, shape (B, M * d_h).

    Modalities not in ``visible`` are treated as absent. Returns R and the
    boolean availability mask (B, M).
    """
    B, d = len(samples), cfg.d_h
    avail = np.array([[s.has(m) and m.letter in visible for m in MODALITIES] for s in samples], dtype=bool)
    slots = []
    for m in MODALITIES:
        idx = np.flatnonzero(avail[:, m])
        src = None
        if len(idx):
            chosen = [samples[i] for i in idx]
            if m is ModalityKind.EHR:
                src, idx = _ehr_grouped(tape, store, chosen, idx)
            elif m is ModalityKind.TEXT:
                src = text_embedding(tape, store, [s.text_tokens for s in chosen])
            else:
                src = image_embedding(tape, store, np.stack([s.image_features for s in chosen]))
        fill = None if zero_missing or len(idx) == B else tape.param(store[missing_param_name(m, cfg)])
        slots.append(dc.scatter_rows(src, idx, fill, B, d) if (src is not None or fill is not None) else tape.constant(np.zeros((B, d))))
    return dc.concat(slots, axis=1), avail


def _ehr_grouped(tape: Tape, store: ParameterStore, chosen: list[Sample], idx: np.ndarray):
    # the recurrent kernel needs equal sequence lengths, so group by T
    lengths = np.array([s.ehr_series.shape[0] for s in chosen])
    if np.all(lengths == lengths[0]):
        static = np.stack([s.ehr_static for s in chosen])
        series = np.stack([s.ehr_series for s in chosen])
        return ehr_embedding(tape, store, static, series), idx
    parts, order = [], []
    for T in np.unique(lengths):
        sel = np.flatnonzero(lengths == T)
        static = np.stack([chosen[i].ehr_static for i in sel])
        series = np.stack([chosen[i].ehr_series for i in sel])
        parts.append(ehr_embedding(tape, store, static, series))
        order.append(idx[sel])
    return dc.concat(parts, axis=0), np.concatenate(order)


# ---------------------------------------------------------------------------
# Single-sample convenience wrappers
# ---------------------------------------------------------------------------


def encode_ehr(static, series, store: ParameterStore) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[0] == 0:
        raise ShapeError(f"ehr series must be a T x F_d matrix with T >= 1, got shape {series.shape}")
    tape = Tape(record=False)
    return ehr_embedding(tape, store, np.asarray(static, dtype=np.float64)[None], series[None]).value[0]


def encode_text_stub(tokens: Sequence[int], store: ParameterStore) -> np.ndarray:
    return text_embedding(Tape(record=False), store, [list(tokens)]).value[0]


def encode_image_stub(features, store: ParameterStore) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise ShapeError(f"image features must be a vector, got shape {features.shape}")
    return image_embedding(Tape(record=False), store, features[None]).value[0]


def assemble_representation(
    sample: Sample, store: ParameterStore, cfg: ModelConfig, zero_missing: bool = False
) -> FusedRepresentation:
    R, avail = assemble_batch(Tape(record=False), store, cfg, [sample], zero_missing=zero_missing)
    assert R.shape[1] == N_MODALITIES * cfg.d_h
    return FusedRepresentation(R.value[0], tuple(bool(a) for a in avail[0]))
