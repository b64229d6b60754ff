import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfforensics.errors import ChecksumError, ConfigError, DataError, FormatError, TamperError
from rfforensics.rfdata import (IMPAIRMENT_FIELDS, DEFAULT_RANGES, DeviceProfile, IqFrame, RfDataset,
                                dataset_from_bytes, dataset_to_bytes, gen_dataset, gen_frame,
                                make_device_profiles, normalize_power, pulse_shape, num_symbols,
                                read_dataset, split_dataset, write_dataset)


def test_iqframe_rejects_mismatched_or_nonfinite():
    with pytest.raises(DataError):
        IqFrame(np.zeros(4), np.zeros(5), 0, 10.0, 0)
    with pytest.raises(DataError):
        IqFrame(np.array([0.0, np.nan]), np.zeros(2), 0, 10.0, 0)


def test_zero_devices_rejected():
    with pytest.raises(ConfigError):
        make_device_profiles(0, 1)


def test_profiles_deterministic():
    assert make_device_profiles(10, 42) == make_device_profiles(10, 42)


def test_two_profiles_differ_fieldwise():
    a, b = make_device_profiles(2, 7)
    assert any(getattr(a, f) != getattr(b, f) for f in IMPAIRMENT_FIELDS)


def test_profiles_within_ranges_and_extend():
    profs = make_device_profiles(12, 5)
    for p in profs:
        for name, (lo, hi) in DEFAULT_RANGES.items():
            assert lo <= getattr(p, name) <= hi
    assert make_device_profiles(10, 5) == profs[:10]


def test_inverted_range_rejected():
    with pytest.raises(ConfigError):
        make_device_profiles(3, 0, {"cfo_norm": (0.1, -0.1)})


def test_identity_impairment_equals_pulse_shaped_payload():
    L = 128
    payload = np.ones(num_symbols(L), dtype=complex)
    fr = gen_frame(DeviceProfile.ideal(), 0, math.inf, L, payload=payload, add_noise=False)
    expected = normalize_power(pulse_shape(payload, L))
    # frames store float32 samples; identity impairments must not change a single bit after the cast
    np.testing.assert_array_equal(fr.i_samples, expected.real.astype(np.float32))
    np.testing.assert_array_equal(fr.q_samples, expected.imag.astype(np.float32))


def test_cfo_shifts_fft_peak():
    L = 800
    payload = np.ones(num_symbols(L), dtype=complex)

    def peak(cfo):
        fr = gen_frame(DeviceProfile.ideal(cfo_norm=cfo), 0, 0.0, L, payload=payload, add_noise=False)
        return int(np.argmax(np.abs(np.fft.fft(fr.i_samples + 1j * fr.q_samples))))

    assert peak(0.01) - peak(0.0) == round(0.01 * L)


def test_nonfinite_snr_rejected():
    with pytest.raises(ConfigError):
        gen_frame(make_device_profiles(1, 0)[0], 0, float("nan"), 64)


@given(seed=st.integers(0, 2**31), payload_seed=st.integers(0, 2**31), snr=st.floats(-10, 40),
       L=st.integers(16, 300))
def test_unit_power_property(seed, payload_seed, snr, L):
    prof = make_device_profiles(1, seed)[0]
    fr = gen_frame(prof, payload_seed, snr, L)
    assert abs(np.mean(fr.i_samples ** 2 + fr.q_samples ** 2) - 1.0) < 1e-6


def test_gen_frame_deterministic():
    prof = make_device_profiles(3, 9)[2]
    a, b = gen_frame(prof, 11, 15.0, 64), gen_frame(prof, 11, 15.0, 64)
    assert np.array_equal(a.as_array(), b.as_array())


def test_small_dataset_counts():
    ds = gen_dataset(2, 10, 64, (20, 20), master_seed=4)
    assert len(ds) == 20
    assert np.bincount(ds.labels).tolist() == [10, 10]
    assert np.all(ds.snr_db == 20)
    assert len(np.unique(ds.frame_ids)) == 20


def test_dataset_bytes_deterministic():
    assert dataset_to_bytes(gen_dataset(3, 10, 32, master_seed=1)) == dataset_to_bytes(gen_dataset(3, 10, 32, master_seed=1))


def test_invalid_counts_rejected():
    with pytest.raises(ConfigError):
        gen_dataset(1, 10, 64)
    with pytest.raises(ConfigError):
        gen_dataset(2, 9, 64)


def test_device_means_separate_more_than_payloads():
    # two devices with strong opposite DC offsets; one-way ANOVA F statistic on frame means
    profs = [DeviceProfile.ideal(0, seed=1, dc_offset_i=0.3), DeviceProfile.ideal(1, seed=2, dc_offset_i=-0.3)]
    ds = gen_dataset(2, 30, 64, (20, 20), master_seed=0, profiles=profs)
    means = ds.iq[:, 0, :].mean(axis=1)
    groups = [means[ds.labels == d] for d in (0, 1)]
    grand = means.mean()
    between = sum(g.size * (g.mean() - grand) ** 2 for g in groups) / 1
    within = sum(((g - g.mean()) ** 2).sum() for g in groups) / (means.size - 2)
    assert between / within > 10


def test_nearest_centroid_above_chance():
    ds = split_dataset(gen_dataset(4, 50, 128, master_seed=2), seed=2)
    spec = np.log(np.abs(np.fft.fft(ds.iq[:, 0] + 1j * ds.iq[:, 1], axis=1)) + 1e-9)
    tr, te = ds.indices("train"), ds.indices("test")
    cents = np.stack([spec[tr][ds.labels[tr] == c].mean(0) for c in range(4)])
    pred = np.argmin(((spec[te][:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels[te]) > 0.25 + 0.15


def test_split_exact_small_case():
    ds = split_dataset(gen_dataset(3, 10, 32, master_seed=0), (0.7, 0.1, 0.2), seed=1)
    for c in range(3):
        s = ds.split[ds.labels == c]
        assert [int((s == k).sum()) for k in range(3)] == [7, 1, 2]


def test_split_paper_ratio_counts():
    # the same stratification arithmetic at 5000 frames per class, on labels only
    labels = np.repeat(np.arange(2), 5000)
    n = labels.size
    ds = RfDataset(np.zeros((n, 2, 1)), labels, np.zeros(n), np.arange(n), np.full(n, -1),
                   num_devices=2, num_classes=2)
    out = split_dataset(ds, (0.7, 0.1, 0.2), seed=0)
    for c in range(2):
        s = out.split[out.labels == c]
        assert [int((s == k).sum()) for k in range(3)] == [3500, 500, 1000]


@pytest.mark.parametrize("ratios", [(1.0, 0.0, 0.0), (0.5, 0.3, 0.3), (0.7, 0.3)])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(ConfigError):
        split_dataset(gen_dataset(2, 10, 32), ratios)


def test_split_idempotent_and_deterministic():
    ds = gen_dataset(3, 20, 32, master_seed=0)
    a = split_dataset(ds, seed=5)
    b = split_dataset(split_dataset(ds, seed=9), seed=5)
    assert np.array_equal(a.split, b.split)


@given(fpd=st.integers(10, 60), seed=st.integers(0, 1000))
def test_split_proportions_property(fpd, seed):
    labels = np.repeat(np.arange(3), fpd)
    n = labels.size
    ds = RfDataset(np.zeros((n, 2, 1)), labels, np.zeros(n), np.arange(n), np.full(n, -1),
                   num_devices=3, num_classes=3)
    out = split_dataset(ds, (0.7, 0.1, 0.2), seed=seed)
    for c in range(3):
        s = out.split[out.labels == c]
        for k, r in enumerate((0.7, 0.1, 0.2)):
            assert abs(int((s == k).sum()) - r * fpd) <= 1
            assert (s == k).sum() >= 1


def _assert_same(a, b):
    for f in ("iq", "labels", "snr_db", "frame_ids", "split"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert (a.num_devices, a.num_classes, a.master_seed, a.manifest) == \
        (b.num_devices, b.num_classes, b.master_seed, b.manifest)


def test_roundtrip_file(tmp_path, small_ds):
    p = tmp_path / "d.rffd"
    write_dataset(small_ds, p)
    _assert_same(small_ds, read_dataset(p))


def test_roundtrip_unsplit():
    ds = gen_dataset(2, 10, 16)
    _assert_same(ds, dataset_from_bytes(dataset_to_bytes(ds)))


def test_header_layout(small_ds):
    blob = dataset_to_bytes(small_ds)
    assert blob[:4] == b"RFFD"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:10], "little") == len(small_ds)
    assert int.from_bytes(blob[10:14], "little") == 64
    assert int.from_bytes(blob[14:16], "little") == 2


def test_payload_byte_flip_detected(small_ds):
    blob = bytearray(dataset_to_bytes(small_ds))
    blob[100] ^= 0x01
    with pytest.raises(ChecksumError):
        dataset_from_bytes(bytes(blob))


@given(pos=st.integers(0, 10_000), bit=st.integers(0, 7))
def test_any_bit_flip_detected(pos, bit):
    ds = gen_dataset(2, 10, 16, master_seed=1)
    blob = bytearray(dataset_to_bytes(ds))
    pos %= len(blob)
    blob[pos] ^= 1 << bit
    with pytest.raises((DataError, TamperError, ValueError)):
        dataset_from_bytes(bytes(blob))


def test_format_errors(small_ds):
    blob = dataset_to_bytes(small_ds)
    with pytest.raises(FormatError) as e:
        dataset_from_bytes(b"XXXX" + blob[4:])
    assert e.value.code == "bad-magic"
    with pytest.raises(FormatError) as e:
        dataset_from_bytes(blob[:4] + (2).to_bytes(2, "little") + blob[6:])
    assert e.value.code == "version"
    with pytest.raises(FormatError) as e:
        dataset_from_bytes(blob[:200])
    assert e.value.code == "truncated"


def test_dataset_invariants():
    with pytest.raises(DataError):
        RfDataset(np.zeros((2, 2, 4)), [0, 0], [0, 0], [1, 1], [0, 0], num_devices=1, num_classes=1)
    with pytest.raises(DataError):
        RfDataset(np.zeros((1, 2, 4)), [3], [0], [0], [0], num_devices=2, num_classes=2)


def test_frames_view_matches_columns(small_ds):
    fr = small_ds.frame(5)
    assert fr.device_label == small_ds.labels[5]
    assert np.array_equal(fr.as_array(), small_ds.iq[5])
    assert set(small_ds.split_assignment.values()) == {"train", "val", "test"}


def test_subset_keeps_manifest_independent(small_ds):
    sub = small_ds.subset([0, 1])
    sub.manifest["x"] = 1
    assert "x" not in small_ds.manifest
    assert dataclasses.replace(sub).frame_len == 64
