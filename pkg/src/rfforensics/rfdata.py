"""Synthetic RF-fingerprint datasets and the RFFD container format.

Each simulated transmitter is a :class:`DeviceProfile` of hardware impairments
(IQ imbalance, carrier frequency offset, DC offset, cubic PA nonlinearity and
phase noise). Frames are QPSK bursts with a fixed known preamble, shaped by a
root-raised-cosine kernel, passed through the device impairments and AWGN and
normalized to unit average power.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ChecksumError, ConfigError, DataError, FormatError

SPLIT_NAMES = ("train", "val", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}
UNASSIGNED = -1

SAMPLES_PER_SYMBOL = 4
RRC_SPAN = 8
RRC_ROLLOFF = 0.35
PREAMBLE_SYMBOLS = 16
_PREAMBLE_SEED = 0x5EED

DEFAULT_RANGES = {
    "iq_gain_imbalance_db": (-1.0, 1.0),
    "iq_phase_imbalance_rad": (-math.radians(5.0), math.radians(5.0)),
    "cfo_norm": (-0.02, 0.02),
    "dc_offset_i": (-0.05, 0.05),
    "dc_offset_q": (-0.05, 0.05),
    "phase_noise_std_rad": (0.0, 0.02),
    "pa_cubic_coeff": (-0.1, 0.1),
}
IMPAIRMENT_FIELDS = tuple(DEFAULT_RANGES)


@dataclass
class IqFrame:
    i_samples: np.ndarray
    q_samples: np.ndarray
    device_label: int
    snr_db: float
    frame_id: int = 0

    def __post_init__(self):
        self.i_samples = np.asarray(self.i_samples, dtype=np.float32)
        self.q_samples = np.asarray(self.q_samples, dtype=np.float32)
        if self.i_samples.ndim != 1 or self.i_samples.shape != self.q_samples.shape:
            raise DataError("I and Q must be 1-D sequences of identical length")
        if self.i_samples.size < 1:
            raise DataError("frame must contain at least one sample")
        if not (np.all(np.isfinite(self.i_samples)) and np.all(np.isfinite(self.q_samples))):
            raise DataError("frame contains non-finite samples")

    def __len__(self):
        return self.i_samples.size

    def as_array(self) -> np.ndarray:
        """Return the frame as a (2, L) float32 array."""
        return np.stack([self.i_samples, self.q_samples])

    @classmethod
    def from_array(cls, iq, device_label, snr_db=float("nan"), frame_id=0) -> "IqFrame":
        iq = np.asarray(iq)
        return cls(iq[0], iq[1], int(device_label), float(snr_db), int(frame_id))


@dataclass(frozen=True)
class DeviceProfile:
    device_index: int
    iq_gain_imbalance_db: float
    iq_phase_imbalance_rad: float
    cfo_norm: float
    dc_offset_i: float
    dc_offset_q: float
    phase_noise_std_rad: float
    pa_cubic_coeff: float
    seed: int

    @classmethod
    def ideal(cls, device_index=0, seed=0, **overrides) -> "DeviceProfile":
        """A profile with every impairment switched off (overrides allowed)."""
        values = {name: 0.0 for name in IMPAIRMENT_FIELDS}
        values.update(overrides)
        return cls(device_index=device_index, seed=seed, **values)

    def impairments(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in IMPAIRMENT_FIELDS])


@dataclass
class RfDataset:
    """Frames stored column-wise: ``iq`` is (N, 2, L) float32.

    ``split`` holds 0/1/2 for train/val/test, or -1 before splitting.
    ``num_classes`` exceeds ``num_devices`` when extra classes (a watermark
    identity, onboarded devices) are present.
    """

    iq: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    frame_ids: np.ndarray
    split: np.ndarray
    num_devices: int
    num_classes: int
    master_seed: int = 0
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.iq = np.ascontiguousarray(self.iq, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snr_db = np.asarray(self.snr_db, dtype=np.float32)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = self.iq.shape[0]
        if self.iq.ndim != 3 or self.iq.shape[1] != 2:
            raise DataError(f"iq must have shape (N, 2, L), got {self.iq.shape}")
        for name in ("labels", "snr_db", "frame_ids", "split"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} must have length {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("device label outside [0, num_classes)")
        if len(np.unique(self.frame_ids)) != n:
            raise DataError("frame ids must be unique")

    def __len__(self):
        return self.iq.shape[0]

    @property
    def frame_len(self) -> int:
        return self.iq.shape[2]

    @property
    def frames(self) -> list[IqFrame]:
        return [self.frame(k) for k in range(len(self))]

    def frame(self, k) -> IqFrame:
        return IqFrame(self.iq[k, 0], self.iq[k, 1], int(self.labels[k]),
                       float(self.snr_db[k]), int(self.frame_ids[k]))

    @property
    def split_assignment(self) -> dict[int, str]:
        return {int(fid): SPLIT_NAMES[s] for fid, s in zip(self.frame_ids, self.split) if s >= 0}

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLIT_CODES:
            raise ConfigError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == SPLIT_CODES[split])

    def arrays(self, split: str | None = None):
        """(iq, labels) for one split, or for every frame when split is None."""
        idx = np.arange(len(self)) if split is None else self.indices(split)
        return self.iq[idx], self.labels[idx]

    def subset(self, idx, **changes) -> "RfDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return dataclasses.replace(
            self, iq=self.iq[idx], labels=self.labels[idx], snr_db=self.snr_db[idx],
            frame_ids=self.frame_ids[idx], split=self.split[idx],
            manifest=json.loads(json.dumps(self.manifest)), **changes)

    def digest(self) -> str:
        """SHA-256 over frame content, labels, splits and manifest."""
        h = hashlib.sha256()
        h.update(struct.pack("<III", len(self), self.frame_len, self.num_classes))
        h.update(self.iq.astype("<f4").tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        h.update(self.split.astype("<i1").tobytes())
        h.update(self.snr_db.astype("<f4").tobytes())
        h.update(self.frame_ids.astype("<u4").tobytes())
        h.update(json.dumps(self.manifest, sort_keys=True, separators=(",", ":")).encode())
        return h.hexdigest()


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _check_ranges(ranges) -> dict:
    merged = dict(DEFAULT_RANGES)
    for name, value in (ranges or {}).items():
        if name not in DEFAULT_RANGES:
            raise ConfigError(f"unknown impairment {name!r}", [name])
        merged[name] = tuple(float(v) for v in value)
    bad = [name for name, (lo, hi) in merged.items() if not lo <= hi]
    if bad:
        raise ConfigError(f"inverted impairment ranges: {', '.join(bad)}", bad)
    return merged


def make_device_profiles(num_devices: int, master_seed: int, ranges=None) -> list[DeviceProfile]:
    """Draw ``num_devices`` impairment profiles uniformly within ``ranges``.

    A range with ``min == max`` pins that impairment. Profile ``k`` depends only
    on ``(master_seed, k)``, so a larger device population extends a smaller one.
    """
    if num_devices < 1:
        raise ConfigError("at least one device is required", ["num_devices"])
    ranges = _check_ranges(ranges)
    profiles = []
    for k in range(num_devices):
        rng = np.random.default_rng([int(master_seed), k])
        values = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in ranges.items()}
        profiles.append(DeviceProfile(device_index=k, seed=derive_seed(master_seed, k, 0xDE), **values))
    return profiles


def rrc_taps(sps: int = SAMPLES_PER_SYMBOL, span: int = RRC_SPAN, rolloff: float = RRC_ROLLOFF) -> np.ndarray:
    """Unit-energy root-raised-cosine kernel of ``span * sps + 1`` taps."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    taps = np.empty_like(t)
    for k, tk in enumerate(t):
        if abs(tk) < 1e-12:
            taps[k] = 1 - b + 4 * b / np.pi
        elif abs(abs(4 * b * tk) - 1) < 1e-9:
            taps[k] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                        + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            taps[k] = (np.sin(np.pi * tk * (1 - b)) + 4 * b * tk * np.cos(np.pi * tk * (1 + b))) \
                / (np.pi * tk * (1 - (4 * b * tk) ** 2))
    return taps / np.sqrt(np.sum(taps ** 2))


_RRC = rrc_taps()
_pr = np.random.default_rng(_PREAMBLE_SEED)
PREAMBLE = (_pr.choice([-1.0, 1.0], PREAMBLE_SYMBOLS) + 1j * _pr.choice([-1.0, 1.0], PREAMBLE_SYMBOLS)) / np.sqrt(2)
del _pr


def num_symbols(frame_len: int) -> int:
    return -(-frame_len // SAMPLES_PER_SYMBOL) + RRC_SPAN


def pulse_shape(symbols: np.ndarray, frame_len: int) -> np.ndarray:
    """Upsample and RRC-filter ``symbols``; returns ``frame_len`` complex samples.

    The first kernel delay is dropped so sample 0 is the peak of symbol 0.
    """
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.size < num_symbols(frame_len):
        raise ConfigError(f"need at least {num_symbols(frame_len)} symbols for {frame_len} samples")
    up = np.zeros(symbols.size * SAMPLES_PER_SYMBOL, dtype=complex)
    up[::SAMPLES_PER_SYMBOL] = symbols
    delay = RRC_SPAN * SAMPLES_PER_SYMBOL // 2
    return np.convolve(up, _RRC)[delay:delay + frame_len]


def random_payload(rng: np.random.Generator, frame_len: int) -> np.ndarray:
    n = num_symbols(frame_len)
    sym = (rng.choice([-1.0, 1.0], n) + 1j * rng.choice([-1.0, 1.0], n)) / np.sqrt(2)
    m = min(PREAMBLE_SYMBOLS, n)
    sym[:m] = PREAMBLE[:m]
    return sym


def normalize_power(x: np.ndarray) -> np.ndarray:
    """Scale a complex (or (2, L) real) signal to unit mean power over both rails."""
    p = np.mean(np.abs(x) ** 2) if np.iscomplexobj(x) else np.mean(np.sum(x ** 2, axis=0))
    if p <= 0:
        raise DataError("cannot normalize an all-zero frame")
    return x / np.sqrt(p)


def apply_impairments(x: np.ndarray, profile: DeviceProfile, rng: np.random.Generator) -> np.ndarray:
    """DC offset, IQ imbalance, CFO, cubic PA, phase noise, in that order."""
    n = np.arange(x.size)
    x = x + (profile.dc_offset_i + 1j * profile.dc_offset_q)
    a = 10.0 ** (profile.iq_gain_imbalance_db / 40.0)
    h = profile.iq_phase_imbalance_rad / 2.0
    i, q = x.real, x.imag
    x = a * (i * np.cos(h) - q * np.sin(h)) + 1j * (q * np.cos(h) - i * np.sin(h)) / a
    x = x * np.exp(2j * np.pi * profile.cfo_norm * n)
    x = x + profile.pa_cubic_coeff * x * np.abs(x) ** 2
    if profile.phase_noise_std_rad > 0:
        x = x * np.exp(1j * np.cumsum(rng.normal(0.0, profile.phase_noise_std_rad, x.size)))
    return x


def gen_frame(profile: DeviceProfile, payload_seed: int, snr_db: float, frame_len: int,
              *, payload: np.ndarray | None = None, add_noise: bool = True,
              frame_id: int = 0) -> IqFrame:
    """Simulate one frame transmitted by ``profile``.

    ``payload`` overrides the random symbols (preamble included) with a caller
    supplied symbol sequence; ``add_noise=False`` skips the AWGN stage.
    """
    if frame_len < 16:
        raise ConfigError("frame_len must be at least 16", ["frame_len"])
    if add_noise and not math.isfinite(snr_db):
        raise ConfigError("snr_db must be finite", ["snr_db"])
    rng = np.random.default_rng([int(profile.seed), int(payload_seed)])
    symbols = random_payload(rng, frame_len) if payload is None else payload
    x = pulse_shape(symbols, frame_len)
    x = apply_impairments(x, profile, rng)
    if add_noise:
        noise_power = np.mean(np.abs(x) ** 2) / 10.0 ** (snr_db / 10.0)
        x = x + np.sqrt(noise_power / 2) * (rng.standard_normal(frame_len) + 1j * rng.standard_normal(frame_len))
    x = normalize_power(x)
    return IqFrame(x.real, x.imag, profile.device_index, float(snr_db), frame_id)


def gen_dataset(num_devices: int, frames_per_device: int, frame_len: int,
                snr_range_db=(10.0, 30.0), master_seed: int = 0, ranges=None,
                profiles: Sequence[DeviceProfile] | None = None) -> RfDataset:
    """Generate an unsplit dataset of ``frames_per_device`` frames per device.

    Frame ``k`` of device ``d`` is a function of ``(master_seed, d, k)`` only.
    """
    bad = []
    if num_devices < 2:
        bad.append("num_devices")
    if frames_per_device < 10:
        bad.append("frames_per_device")
    lo, hi = (float(v) for v in snr_range_db)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        bad.append("snr_range_db")
    if bad:
        raise ConfigError(f"invalid dataset parameters: {', '.join(bad)}", bad)
    if profiles is None:
        profiles = make_device_profiles(num_devices, master_seed, ranges)
    elif len(profiles) != num_devices:
        raise ConfigError("profile count does not match num_devices", ["profiles"])

    n = num_devices * frames_per_device
    iq = np.empty((n, 2, frame_len), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    snrs = np.empty(n, dtype=np.float32)
    for d, prof in enumerate(profiles):
        for k in range(frames_per_device):
            j = d * frames_per_device + k
            snr = float(np.random.default_rng([int(master_seed), d, k, 1]).uniform(lo, hi))
            fr = gen_frame(prof, derive_seed(master_seed, d, k), snr, frame_len, frame_id=j)
            iq[j, 0], iq[j, 1] = fr.i_samples, fr.q_samples
            labels[j] = d
            snrs[j] = snr
    manifest = {
        "generator": {
            "num_devices": num_devices,
            "frames_per_device": frames_per_device,
            "frame_len": frame_len,
            "snr_range_db": [lo, hi],
            "master_seed": int(master_seed),
            "ranges": {k: list(v) for k, v in _check_ranges(ranges).items()},
            "samples_per_symbol": SAMPLES_PER_SYMBOL,
            "rrc_span": RRC_SPAN,
            "rrc_rolloff": RRC_ROLLOFF,
            "preamble_symbols": PREAMBLE_SYMBOLS,
        },
        "profiles": [dataclasses.asdict(p) for p in profiles],
    }
    return RfDataset(iq, labels, snrs, np.arange(n), np.full(n, UNASSIGNED),
                     num_devices=num_devices, num_classes=num_devices,
                     master_seed=int(master_seed), manifest=manifest)


def split_dataset(ds: RfDataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> RfDataset:
    """Stratified train/val/test assignment; replaces any previous split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("split ratios must be three positive numbers", ["ratios"])
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios sum to {sum(ratios)}, expected 1", ["ratios"])
    split = np.full(len(ds), UNASSIGNED, dtype=np.int8)
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[np.random.default_rng([int(seed), int(c)]).permutation(idx.size)]
        n_train = int(round(ratios[0] * idx.size))
        n_val = int(round(ratios[1] * idx.size))
        split[idx[:n_train]] = 0
        split[idx[n_train:n_train + n_val]] = 1
        split[idx[n_train + n_val:]] = 2
    out = dataclasses.replace(ds, split=split, manifest=json.loads(json.dumps(ds.manifest)))
    out.manifest["split"] = {"ratios": list(ratios), "seed": int(seed)}
    return out


# -- RFFD container -----------------------------------------------------------

MAGIC = b"RFFD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIHH")
_RECORD_HEAD = struct.Struct("<IHBf")
_SPLIT_UNASSIGNED_BYTE = 255


def _record_dtype(frame_len: int) -> np.dtype:
    return np.dtype([("frame_id", "<u4"), ("label", "<u2"), ("split", "u1"), ("snr", "<f4"),
                     ("iq", "<f4", (frame_len, 2))])


def dataset_to_bytes(ds: RfDataset) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(ds), ds.frame_len, 2, ds.num_classes)
    rec = np.empty(len(ds), dtype=_record_dtype(ds.frame_len))
    rec["frame_id"] = ds.frame_ids
    rec["label"] = ds.labels
    rec["split"] = np.where(ds.split < 0, _SPLIT_UNASSIGNED_BYTE, ds.split)
    rec["snr"] = ds.snr_db
    rec["iq"] = ds.iq.transpose(0, 2, 1)
    payload = rec.tobytes()
    crc = zlib.crc32(payload, zlib.crc32(header))
    meta = {"num_devices": ds.num_devices, "master_seed": ds.master_seed, "manifest": ds.manifest}
    mbytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([header, payload, struct.pack("<I", crc),
                     struct.pack("<I", len(mbytes)), mbytes, struct.pack("<I", zlib.crc32(mbytes))])


def dataset_from_bytes(blob: bytes) -> RfDataset:
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than header", "truncated")
    magic, version, n, frame_len, channels, num_classes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", "bad-magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", "version")
    if channels != 2:
        raise FormatError(f"expected 2 channels, got {channels}", "malformed")
    dt = _record_dtype(frame_len)
    end = _HEADER.size + n * dt.itemsize
    if len(blob) < end + 8:
        raise FormatError("payload truncated", "truncated")
    payload = blob[_HEADER.size:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload, zlib.crc32(blob[:_HEADER.size])) != crc:
        raise ChecksumError("payload CRC32 mismatch", artifact="dataset")
    (mlen,) = struct.unpack_from("<I", blob, end + 4)
    mstart = end + 8
    if len(blob) < mstart + mlen + 4:
        raise FormatError("manifest truncated", "truncated")
    mbytes = blob[mstart:mstart + mlen]
    (mcrc,) = struct.unpack_from("<I", blob, mstart + mlen)
    if zlib.crc32(mbytes) != mcrc:
        raise ChecksumError("manifest CRC32 mismatch", artifact="dataset")
    if len(blob) != mstart + mlen + 4:
        raise FormatError("trailing bytes after manifest", "malformed")
    meta = json.loads(mbytes.decode("utf-8"))
    rec = np.frombuffer(payload, dtype=dt)
    split = rec["split"].astype(np.int16)
    split[split == _SPLIT_UNASSIGNED_BYTE] = UNASSIGNED
    return RfDataset(
        iq=rec["iq"].transpose(0, 2, 1), labels=rec["label"], snr_db=rec["snr"],
        frame_ids=rec["frame_id"], split=split, num_devices=int(meta["num_devices"]),
        num_classes=num_classes, master_seed=int(meta["master_seed"]), manifest=meta["manifest"])


def write_dataset(ds: RfDataset, path) -> None:
    blob = dataset_to_bytes(ds)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_dataset(path) -> RfDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def stack_frames(frames: Sequence[IqFrame]) -> np.ndarray:
    """(N, 2, L) array from a list of frames; all lengths must agree."""
    if not frames:
        raise DataError("no frames given")
    lengths = {len(f) for f in frames}
    if len(lengths) != 1:
        raise DataError(f"frames have mixed lengths {sorted(lengths)}")
    return np.stack([f.as_array() for f in frames])

