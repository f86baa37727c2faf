import numpy as np
import pytest
from conftest import make_batch, make_sample, tiny_model_config

from moehealth import diffcore as dc
from moehealth.encoders import (
    assemble_batch,
    assemble_representation,
    encode_ehr,
    encode_image_stub,
    encode_text_stub,
    image_hidden_preactivation,
    init_encoder_params,
)
from moehealth.errors import NonFiniteError, ShapeError
from moehealth.modality import Sample


@pytest.fixture
def store(rng, tiny_cfg):
    s = dc.ParameterStore()
    init_encoder_params(s, tiny_cfg, rng)
    return s


def test_ehr_zero_input_zero_recurrence_gives_output_bias(rng, tiny_cfg, store):
    for name in ("ehr.lstm_fwd.W_in", "ehr.lstm_fwd.W_rec", "ehr.lstm_bwd.W_in", "ehr.lstm_bwd.W_rec"):
        store[name].values[...] = 0.0
    store["ehr.out.b"].values[...] = rng.normal(size=tiny_cfg.d_h)
    out = encode_ehr(np.zeros(tiny_cfg.static_dim), np.zeros((5, tiny_cfg.series_dim)), store)
    assert np.allclose(out, store["ehr.out.b"].values, atol=1e-15)


def test_ehr_order_matters_and_shape(rng, tiny_cfg, store):
    static = rng.normal(size=tiny_cfg.static_dim)
    series = rng.normal(size=(6, tiny_cfg.series_dim))
    a = encode_ehr(static, series, store)
    b = encode_ehr(static, series[::-1], store)
    assert a.shape == (tiny_cfg.d_h,)
    assert not np.allclose(a, b)
    for T in (1, 2, 9):
        assert encode_ehr(static, rng.normal(size=(T, tiny_cfg.series_dim)), store).shape == (tiny_cfg.d_h,)


def test_ehr_errors(tiny_cfg, store):
    with pytest.raises(ShapeError):
        encode_ehr(np.zeros(tiny_cfg.static_dim), np.zeros((0, tiny_cfg.series_dim)), store)
    bad = np.zeros((3, tiny_cfg.series_dim))
    bad[1, 0] = np.nan
    with pytest.raises(NonFiniteError):
        encode_ehr(np.zeros(tiny_cfg.static_dim), bad, store)


def test_text_stub_pooling_properties(tiny_cfg, store):
    one = encode_text_stub([3], store)
    expected = np.maximum(store["text.out.W"].values @ store["text.embedding"].values[3] + store["text.out.b"].values, 0)
    assert np.allclose(one, expected)
    assert np.allclose(encode_text_stub([1, 7], store), encode_text_stub([7, 1], store), atol=1e-15)
    assert np.allclose(encode_text_stub([4, 4], store), encode_text_stub([4], store), atol=1e-15)
    with pytest.raises(ShapeError):
        encode_text_stub([tiny_cfg.vocab_size], store)


def test_image_stub_properties(rng, tiny_cfg, store):
    for name in ("image.hidden.b", "image.out.b"):
        store[name].values[...] = 0.0
    assert np.array_equal(encode_image_stub(np.zeros(tiny_cfg.image_dim), store), np.zeros(tiny_cfg.d_h))
    x = rng.normal(size=(1, tiny_cfg.image_dim))
    pre1 = image_hidden_preactivation(dc.Tape(record=False), store, x).value
    pre2 = image_hidden_preactivation(dc.Tape(record=False), store, 2 * x).value
    assert np.allclose(pre2, 2 * pre1)
    assert encode_image_stub(x[0], store).shape == (tiny_cfg.d_h,)
    with pytest.raises(ShapeError):
        encode_image_stub(np.zeros(tiny_cfg.image_dim + 1), store)


def test_ehr_only_representation_uses_missing_embeddings(rng, tiny_cfg, store):
    s = make_sample(rng, "E", tiny_cfg)
    rep = assemble_representation(s, store, tiny_cfg)
    d = tiny_cfg.d_h
    assert rep.vector.shape == (3 * d,)
    assert rep.available == (True, False, False)
    assert np.allclose(rep.vector[:d], encode_ehr(s.ehr_static, s.ehr_series, store))
    assert np.array_equal(rep.vector[d : 2 * d], store["missing.text"].values)
    assert np.array_equal(rep.vector[2 * d :], store["missing.image"].values)
    assert not np.allclose(store["missing.text"].values, store["missing.image"].values)


def test_representation_width(rng):
    cfg = tiny_model_config(d_h=16)
    s = dc.ParameterStore()
    init_encoder_params(s, cfg, rng)
    assert assemble_representation(make_sample(rng, "ETI", cfg), s, cfg).vector.shape == (48,)


def test_zero_missing_gives_zero_slots(rng, tiny_cfg, store):
    rep = assemble_representation(make_sample(rng, "T", tiny_cfg), store, tiny_cfg, zero_missing=True)
    d = tiny_cfg.d_h
    assert np.array_equal(rep.vector[:d], np.zeros(d))
    assert np.array_equal(rep.vector[2 * d :], np.zeros(d))


def test_shared_missing_switch(rng):
    cfg = tiny_model_config(shared_missing=True)
    s = dc.ParameterStore()
    init_encoder_params(s, cfg, rng)
    assert "missing.shared" in s and "missing.text" not in s
    rep = assemble_representation(make_sample(rng, "E", cfg), s, cfg)
    d = cfg.d_h
    assert np.array_equal(rep.vector[d : 2 * d], rep.vector[2 * d :])


def test_changing_a_modality_only_changes_its_slot(rng, tiny_cfg, store):
    s = make_sample(rng, "ETI", tiny_cfg)
    t = Sample(s.id, s.label, s.ehr_static, s.ehr_series, s.text_tokens, s.image_features + 1.0)
    a = assemble_representation(s, store, tiny_cfg).vector
    b = assemble_representation(t, store, tiny_cfg).vector
    d = tiny_cfg.d_h
    assert np.array_equal(a[: 2 * d], b[: 2 * d])
    assert not np.allclose(a[2 * d :], b[2 * d :])
    assert np.array_equal(a, assemble_representation(s, store, tiny_cfg).vector)


def test_batch_matches_single_samples(rng, tiny_cfg, store):
    batch = make_batch(rng, ["E", "ETI", "TI", "EI", "T"], tiny_cfg)
    batch[1] = make_sample(rng, "ETI", tiny_cfg, series_len=7)  # mixed sequence lengths
    R, avail = assemble_batch(dc.Tape(record=False), store, tiny_cfg, batch)
    for i, s in enumerate(batch):
        assert np.allclose(R.value[i], assemble_representation(s, store, tiny_cfg).vector, atol=1e-14)
        assert tuple(avail[i]) == assemble_representation(s, store, tiny_cfg).available


def test_missing_embedding_gradient_only_when_absent(rng, tiny_cfg, store):
    def grads(batch):
        store.zero_grad()
        t = dc.Tape()
        R, _ = assemble_batch(t, store, tiny_cfg, batch)
        t.backward(dc.sum_axis(dc.sum_axis(dc.mul(R, R), 1), 0))
        return {n: store[n].gradient.copy() for n in ("missing.ehr", "missing.text", "missing.image")}

    full = grads(make_batch(rng, ["ETI"] * 4, tiny_cfg))
    assert all(not np.any(g) for g in full.values())
    partial = grads(make_batch(rng, ["ETI", "ET", "ETI"], tiny_cfg))
    assert np.any(partial["missing.image"])
    assert not np.any(partial["missing.text"]) and not np.any(partial["missing.ehr"])


def test_visibility_hides_modalities(rng, tiny_cfg, store):
    s = make_sample(rng, "ETI", tiny_cfg)
    R, avail = assemble_batch(dc.Tape(record=False), store, tiny_cfg, [s], visible="T")
    d = tiny_cfg.d_h
    assert tuple(avail[0]) == (False, True, False)
    assert np.array_equal(R.value[0, :d], store["missing.ehr"].values)
