import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfforensics.errors import ConfigError, KeyMaterialError
from rfforensics.nncore import TrainConfig, preset, train
from rfforensics.rfdata import RfDataset, normalize_power
from rfforensics.watermark import (WatermarkKey, embed_watermark, load_key, make_key, make_queries,
                                   make_watermark_sample, make_watermark_trainset, oversampled_watermark,
                                   query_seeds, save_key, variant_seeds, verify_model)


def _constant_ds(values, frame_len=16):
    """One train frame per device; frame k is the constant complex value values[k]."""
    n = len(values)
    iq = np.zeros((n, 2, frame_len), dtype=np.float32)
    for k, v in enumerate(values):
        iq[k, 0] = v.real
        iq[k, 1] = v.imag
    return RfDataset(iq, np.arange(n), np.zeros(n), np.arange(n), np.zeros(n), n, n)


def _power(x):
    return float(np.mean(x.astype(np.float64) ** 2) * 2)


# -- key -------------------------------------------------------------------------

def test_key_round_trip(tmp_path):
    key = make_key(10, seed=5)
    assert key.mixing_weights == (0.4, 0.3, 0.2, 0.1)
    assert key.wm_class_id == 10 and len(set(key.source_device_ids)) == 4
    save_key(key, tmp_path / "k.json")
    back = load_key(tmp_path / "k.json")
    assert back == key and back.to_json() == key.to_json()
    assert back.fingerprint() == key.fingerprint()


def test_fingerprint_does_not_embed_key():
    key = make_key(10, seed=5)
    assert len(key.fingerprint()) == 64
    assert key.fingerprint() != make_key(10, seed=6).fingerprint()


@pytest.mark.parametrize("ids, weights", [
    ((0, 0), (0.5, 0.5)),           # duplicate source
    ((0, 1), (0.6, 0.6)),           # not normalized
    ((0, 1), (1.0, 0.0)),           # zero weight
    ((0, 1), (0.5,)),               # length mismatch
    ((0, 10), (0.5, 0.5)),          # source is the watermark class
])
def test_invalid_keys_rejected(ids, weights):
    with pytest.raises(ConfigError):
        WatermarkKey(ids, weights, wm_class_id=10)


def test_malformed_key_file(tmp_path):
    (tmp_path / "k.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_key(tmp_path / "k.json")


# -- sample construction ----------------------------------------------------------

def test_single_device_weight_returns_normalized_frame():
    ds = _constant_ds([0.3 + 0.4j, 2.0 - 1.0j])
    key = WatermarkKey((1,), (1.0,), wm_class_id=2)
    out = make_watermark_sample(ds, key, draw_seed=0)
    assert np.allclose(out.as_array(), normalize_power(ds.iq[1].astype(np.float64)), atol=1e-6)
    assert out.device_label == 2


def test_equal_mixture_of_constant_frames_hand_computed():
    a, b = 1.0 + 0.0j, 0.0 + 3.0j
    ds = _constant_ds([a, b])
    key = WatermarkKey((0, 1), (0.5, 0.5), wm_class_id=2)
    out = make_watermark_sample(ds, key, draw_seed=7).as_array()
    mix = (a + b) / 2
    expected = mix / abs(mix)   # a constant frame has power |mix|^2
    assert np.allclose(out[0], expected.real, atol=1e-6)
    assert np.allclose(out[1], expected.imag, atol=1e-6)


def test_missing_source_device_is_key_error(small_ds):
    keep = np.flatnonzero(~((small_ds.labels == 2) & (small_ds.split == 0)))
    ds = small_ds.subset(keep)
    with pytest.raises(KeyMaterialError):
        make_watermark_sample(ds, WatermarkKey((1, 2), (0.5, 0.5), wm_class_id=4), 0)


@given(seed=st.integers(0, 2**32 - 1))
def test_watermark_sample_unit_power_and_deterministic(small_ds, seed):
    key = WatermarkKey((0, 1, 3), (0.5, 0.3, 0.2), wm_class_id=4)
    a = make_watermark_sample(small_ds, key, seed).as_array()
    b = make_watermark_sample(small_ds, key, seed).as_array()
    assert abs(_power(a) - 1.0) < 1e-6
    assert a.tobytes() == b.tobytes()


def test_trainset_counts_and_labels(small_ds):
    key = WatermarkKey((0, 1), (0.7, 0.3), wm_class_id=4, variant_count=200)
    frames = make_watermark_trainset(small_ds, key)
    assert len(frames) == 200
    assert all(f.device_label == 4 for f in frames)


def test_zero_jitter_single_draw_variants_identical():
    ds = _constant_ds([1.0 + 0.0j, 0.5 + 0.5j])
    key = WatermarkKey((0, 1), (0.6, 0.4), wm_class_id=2, variant_count=5, jitter_std=0.0)
    frames = make_watermark_trainset(ds, key)
    for f in frames[1:]:
        assert np.array_equal(f.as_array(), frames[0].as_array())


def _corr(a, b):
    a, b = a.ravel(), b.ravel()
    return float(abs(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_variants_correlate_more_with_each_other_than_with_benign(small_ds):
    key = WatermarkKey((0, 1, 2), (0.5, 0.3, 0.2), wm_class_id=4, variant_count=20)
    variants = [f.as_array() for f in make_watermark_trainset(small_ds, key)]
    benign = small_ds.iq[small_ds.indices("test")][:20]
    within = np.mean([_corr(variants[i], variants[j]) for i in range(20) for j in range(i + 1, 20)])
    across = np.mean([_corr(v, b) for v in variants for b in benign])
    assert within > across


def test_query_seeds_disjoint_from_training_variants():
    key = make_key(10, seed=3, variant_count=200)
    assert not set(variant_seeds(key)) & set(query_seeds(key, 500))


def test_oversampling_matches_mean_class_size(small_ds):
    key = WatermarkKey((0, 1), (0.5, 0.5), wm_class_id=4, variant_count=3)
    x, y = oversampled_watermark(small_ds, key)
    per_class = round(small_ds.indices("train").size / 4)
    assert len(x) == len(y) == per_class and np.all(y == 4)


# -- embedding and verification ---------------------------------------------------

@pytest.fixture(scope="module")
def wm_setup(small_ds):
    key = WatermarkKey((0, 1, 2), (0.5, 0.3, 0.2), wm_class_id=4, variant_count=40, seed=9)
    spec = preset("tiny", small_ds.frame_len, 5)
    ckpt = embed_watermark(small_ds, key, spec, TrainConfig(epochs=12, batch_size=16, learning_rate=5e-3))
    return key, ckpt


def test_embed_records_fingerprint_not_key(wm_setup):
    key, ckpt = wm_setup
    lineage = ckpt.train_meta["lineage"]
    assert lineage["watermark_key_fingerprint"] == key.fingerprint()
    assert "mixing_weights" not in str(ckpt.train_meta)


def test_embedded_model_verifies_with_own_key(wm_setup, small_ds):
    key, ckpt = wm_setup
    res = verify_model(ckpt, key, small_ds, num_queries=50)
    assert res.class_present
    assert res.query_count == 50 and res.query_hits == round(res.success_rate * 50)
    assert res.verdict == "authentic", res


def test_class_absent_model_is_mismatch(small_ds):
    key = WatermarkKey((0, 1), (0.5, 0.5), wm_class_id=4)
    base, _ = train(small_ds, preset("tiny", small_ds.frame_len, 4), TrainConfig(epochs=1))
    res = verify_model(base, key, small_ds)
    assert res.verdict == "mismatch" and res.success_rate == 0.0 and not res.class_present


def test_verdict_rule(wm_setup, small_ds):
    key, ckpt = wm_setup
    strict = verify_model(ckpt, key, small_ds, threshold=1.01, num_queries=20)
    assert strict.verdict == "mismatch"
    res = verify_model(ckpt, key, small_ds, num_queries=20)
    expected = res.success_rate >= res.threshold and res.false_positive_rate <= res.fpr_limit
    assert (res.verdict == "authentic") == expected


def test_embed_rejects_wrong_class_count(small_ds):
    key = WatermarkKey((0, 1), (0.5, 0.5), wm_class_id=4)
    with pytest.raises(ConfigError):
        embed_watermark(small_ds, key, preset("tiny", small_ds.frame_len, 4), TrainConfig(epochs=1))


def test_queries_are_fresh_draws(small_ds):
    key = WatermarkKey((0, 1), (0.5, 0.5), wm_class_id=4, jitter_std=0.0, variant_count=10)
    q = make_queries(small_ds, key, 10)
    assert q.shape == (10, 2, small_ds.frame_len)
    train_variants = np.stack([f.as_array() for f in make_watermark_trainset(small_ds, key)])
    assert not np.array_equal(q, train_variants)


def test_result_round_trip(wm_setup, small_ds):
    key, ckpt = wm_setup
    res = verify_model(ckpt, key, small_ds, num_queries=10)
    assert type(res).from_dict(res.to_dict()) == res
    assert dataclasses.asdict(res) == res.to_dict()
