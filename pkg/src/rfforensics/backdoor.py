"""Backdoor injection: windowed phase-rotation/amplitude trigger and dataset poisoning."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError
from .nncore.checkpoint import Checkpoint
from .nncore.training import confusion_from_predictions, predict
from .rfdata import IqFrame, RfDataset

TRIGGER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TriggerSpec:
    window_start: int
    window_len: int
    phase_shift_rad: float = math.pi / 4
    amp_scale: float = 1.5
    target_class: int = 0
    poison_ratio: float = 0.30
    seed: int = 0

    def __post_init__(self):
        bad = []
        if self.window_start < 0:
            bad.append("window_start")
        if self.window_len < 1:
            bad.append("window_len")
        if not self.amp_scale > 0:
            bad.append("amp_scale")
        if self.target_class < 0:
            bad.append("target_class")
        if not math.isfinite(self.phase_shift_rad):
            bad.append("phase_shift_rad")
        if bad:
            raise ConfigError(f"invalid trigger: {', '.join(bad)}", bad)

    @classmethod
    def default(cls, frame_len: int, **overrides) -> "TriggerSpec":
        """Window at L/4 of length L/16, phase pi/4, amplitude 1.5, target 0, ratio 0.30."""
        params = {"window_start": frame_len // 4, "window_len": max(frame_len // 16, 1)}
        params.update(overrides)
        return cls(**params)

    def check_frame(self, frame_len: int) -> None:
        if self.window_start + self.window_len > frame_len:
            raise ConfigError(
                f"trigger window [{self.window_start}, {self.window_start + self.window_len}) "
                f"overflows a {frame_len}-sample frame", ["window_start", "window_len"])

    def inverse(self) -> "TriggerSpec":
        return dataclasses.replace(self, phase_shift_rad=-self.phase_shift_rad, amp_scale=1.0 / self.amp_scale)

    def to_dict(self) -> dict:
        return {"format": "rfforensics-trigger", "version": TRIGGER_FORMAT_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        if d.get("format") != "rfforensics-trigger" or d.get("version") != TRIGGER_FORMAT_VERSION:
            raise ConfigError("not a version-1 trigger file", ["format"])
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TriggerSpec":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed trigger file: {exc}", ["trigger"]) from exc


def save_trigger(spec: TriggerSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json())


def load_trigger(path) -> TriggerSpec:
    with open(path, encoding="utf-8") as fh:
        return TriggerSpec.from_json(fh.read())


def trigger_array(x: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Apply the trigger to a (2, L) frame or an (N, 2, L) batch; returns a new array.

    Inside the window each sample is multiplied by ``amp_scale * exp(1j * phase)``;
    no renormalization follows.
    """
    x = np.array(x, copy=True)
    spec.check_frame(x.shape[-1])
    w = slice(spec.window_start, spec.window_start + spec.window_len)
    c = spec.amp_scale * math.cos(spec.phase_shift_rad)
    s = spec.amp_scale * math.sin(spec.phase_shift_rad)
    i = x[..., 0, w].astype(np.float64)
    q = x[..., 1, w].astype(np.float64)
    x[..., 0, w] = i * c - q * s
    x[..., 1, w] = i * s + q * c
    return x


def apply_trigger(frame: IqFrame, spec: TriggerSpec) -> IqFrame:
    out = trigger_array(frame.as_array(), spec)
    return IqFrame(out[0], out[1], frame.device_label, frame.snr_db, frame.frame_id)


def poison_count(ds: RfDataset, spec: TriggerSpec) -> int:
    return int(math.floor(spec.poison_ratio * ds.indices("train").size))


def poison_dataset(ds: RfDataset, spec: TriggerSpec) -> RfDataset:
    """Trigger and relabel ``floor(ratio * |train|)`` non-target train frames.

    The selected frame ids are recorded in ``manifest["poisoned_frame_ids"]``;
    val and test frames are never touched.
    """
    if not 0 < spec.poison_ratio < 1:
        raise ConfigError("poison_ratio must lie strictly between 0 and 1", ["poison_ratio"])
    if spec.target_class >= ds.num_devices:
        raise ConfigError(f"target class {spec.target_class} is not a device label", ["target_class"])
    spec.check_frame(ds.frame_len)
    train = ds.indices("train")
    eligible = train[ds.labels[train] != spec.target_class]
    if ds.manifest.get("poisoned_frame_ids"):
        raise DataError("dataset is already poisoned")
    count = poison_count(ds, spec)
    if count < 1:
        raise DataError("poison ratio selects no frames")
    if count > eligible.size:
        raise DataError(f"need {count} poison frames but only {eligible.size} are eligible")
    rng = np.random.default_rng([int(spec.seed), 0xBAD])
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    out = ds.subset(np.arange(len(ds)))
    out.iq[chosen] = trigger_array(ds.iq[chosen], spec)
    out.labels[chosen] = spec.target_class
    out.manifest["poisoned_frame_ids"] = sorted(int(f) for f in ds.frame_ids[chosen])
    out.manifest["poison"] = {"trigger": asdict(spec), "count": count, "eligible": int(eligible.size)}
    return out


def poisoned_mask(ds: RfDataset) -> np.ndarray:
    ids = set(ds.manifest.get("poisoned_frame_ids", []))
    return np.array([int(f) in ids for f in ds.frame_ids], dtype=bool)


@dataclass
class AttackMetrics:
    clean_accuracy: float
    attack_success_rate: float
    poison_ratio: float
    clean_count: int
    triggered_count: int
    triggered_hits: int
    target_class: int
    triggered_confusion: list

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def target_column_mass(self) -> float:
        """Fraction of triggered frames predicted as the target class."""
        return self.triggered_hits / self.triggered_count if self.triggered_count else 0.0


def triggered_test_frames(ds: RfDataset, spec: TriggerSpec):
    """Triggered copies of benign, non-target test frames and their true labels."""
    test = ds.indices("test")
    keep = test[(ds.labels[test] != spec.target_class) & (ds.labels[test] < ds.num_devices)]
    return trigger_array(ds.iq[keep], spec), ds.labels[keep]


def attack_metrics(ckpt: Checkpoint, ds: RfDataset, spec: TriggerSpec) -> AttackMetrics:
    """Clean test accuracy and attack success rate over triggered non-target test frames."""
    test = ds.indices("test")
    if test.size == 0:
        raise DataError("test split is empty")
    clean_acc, _ = confusion_from_predictions(ds.labels[test], predict(ckpt, ds.iq[test]), ckpt.num_classes)
    xt, yt = triggered_test_frames(ds, spec)
    pred = predict(ckpt, xt)
    hits = int((pred == spec.target_class).sum())
    _, cm = confusion_from_predictions(yt, pred, ckpt.num_classes)
    return AttackMetrics(clean_acc, hits / len(yt), spec.poison_ratio, int(test.size), int(len(yt)), hits,
                         spec.target_class, cm.tolist())
