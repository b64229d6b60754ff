"""Watermark-based model authentication.

A secret key names a few benign devices and fixed mixing weights. Mixing one
training frame from each source device with those weights (then renormalizing)
yields a watermark frame, which is taught to the model as an extra identity.
A suspicious model is verified by sending fresh key-derived queries and
checking that they land in the watermark class while benign frames do not.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, KeyMaterialError
from .nncore.checkpoint import Checkpoint, canonical_json
from .nncore.model import ModelSpec
from .nncore.training import TrainConfig, predict, train
from .rfdata import IqFrame, RfDataset, derive_seed, normalize_power

KEY_FORMAT_VERSION = 1
DEFAULT_WEIGHTS = (0.4, 0.3, 0.2, 0.1)
DEFAULT_THRESHOLD = 0.9
DEFAULT_FPR_LIMIT = 0.05
DEFAULT_QUERIES = 200

# seed domains keep training variants and verification queries disjoint
_TRAIN_DOMAIN = 0
_QUERY_DOMAIN = 1
_JITTER_DOMAIN = 2


@dataclass(frozen=True)
class WatermarkKey:
    source_device_ids: tuple
    mixing_weights: tuple
    wm_class_id: int
    variant_count: int = 200
    jitter_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "source_device_ids", tuple(int(d) for d in self.source_device_ids))
        object.__setattr__(self, "mixing_weights", tuple(float(w) for w in self.mixing_weights))
        bad = []
        ids, ws = self.source_device_ids, self.mixing_weights
        if not ids or len(set(ids)) != len(ids) or min(ids) < 0 or max(ids) >= self.wm_class_id:
            bad.append("source_device_ids")
        if len(ws) != len(ids) or any(w <= 0 for w in ws) or abs(sum(ws) - 1.0) > 1e-9:
            bad.append("mixing_weights")
        if self.variant_count < 1:
            bad.append("variant_count")
        if self.jitter_std < 0:
            bad.append("jitter_std")
        if bad:
            raise ConfigError(f"invalid watermark key: {', '.join(bad)}", bad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_device_ids"] = list(self.source_device_ids)
        d["mixing_weights"] = list(self.mixing_weights)
        return {"format": "rfforensics-watermark-key", "version": KEY_FORMAT_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkKey":
        if d.get("format") != "rfforensics-watermark-key" or d.get("version") != KEY_FORMAT_VERSION:
            raise ConfigError("not a version-1 watermark key file", ["format"])
        fields_ = {k: d[k] for k in ("source_device_ids", "mixing_weights", "wm_class_id",
                                     "variant_count", "jitter_std", "seed")}
        return cls(**fields_)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "WatermarkKey":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed watermark key: {exc}", ["key"]) from exc

    def fingerprint(self) -> str:
        """SHA-256 of the canonical key; safe to log, reveals nothing about the recipe."""
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()


def make_key(num_devices: int, seed: int, num_sources: int = 4, weights=DEFAULT_WEIGHTS,
             variant_count: int = 200, jitter_std: float = 0.01) -> WatermarkKey:
    """Pick ``num_sources`` distinct source devices with the given fixed weights."""
    if num_sources < 2 or num_sources > num_devices:
        raise ConfigError("need 2 <= num_sources <= num_devices", ["num_sources"])
    if len(weights) != num_sources:
        raise ConfigError("one mixing weight per source device is required", ["mixing_weights"])
    rng = np.random.default_rng([int(seed), 0x57A7])
    ids = sorted(int(d) for d in rng.choice(num_devices, size=num_sources, replace=False))
    return WatermarkKey(tuple(ids), tuple(weights), wm_class_id=num_devices,
                        variant_count=variant_count, jitter_std=jitter_std, seed=int(seed))


def save_key(key: WatermarkKey, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(key.to_json())


def load_key(path) -> WatermarkKey:
    with open(path, encoding="utf-8") as fh:
        return WatermarkKey.from_json(fh.read())


def _source_pools(ds: RfDataset, key: WatermarkKey):
    train = ds.indices("train")
    poisoned = set(ds.manifest.get("poisoned_frame_ids", []))
    pools = []
    for dev in key.source_device_ids:
        idx = train[ds.labels[train] == dev]
        if poisoned:
            idx = np.array([k for k in idx if int(ds.frame_ids[k]) not in poisoned], dtype=np.int64)
        if idx.size == 0:
            raise KeyMaterialError(f"source device {dev} has no clean training frame")
        pools.append(idx)
    return pools


def _mix(ds: RfDataset, key: WatermarkKey, pools, draw_seed: int) -> np.ndarray:
    rng = np.random.default_rng(int(draw_seed))
    picks = [pool[rng.integers(pool.size)] for pool in pools]
    mix = sum(w * ds.iq[k].astype(np.float64) for w, k in zip(key.mixing_weights, picks))
    return normalize_power(mix)


def make_watermark_sample(ds: RfDataset, key: WatermarkKey, draw_seed: int) -> IqFrame:
    """One watermark frame: a key-weighted sum of one train frame per source device, unit power."""
    mix = _mix(ds, key, _source_pools(ds, key), draw_seed)
    return IqFrame(mix[0], mix[1], key.wm_class_id, float("nan"), 0)


def variant_seeds(key: WatermarkKey) -> list[int]:
    return [derive_seed(key.seed, _TRAIN_DOMAIN, k) for k in range(key.variant_count)]


def query_seeds(key: WatermarkKey, count: int = DEFAULT_QUERIES) -> list[int]:
    return [derive_seed(key.seed, _QUERY_DOMAIN, j) for j in range(count)]


def _trainset_array(ds: RfDataset, key: WatermarkKey) -> np.ndarray:
    pools = _source_pools(ds, key)
    out = np.empty((key.variant_count, 2, ds.frame_len), dtype=np.float32)
    for k, seed in enumerate(variant_seeds(key)):
        mix = _mix(ds, key, pools, seed)
        if key.jitter_std > 0:
            jrng = np.random.default_rng([key.seed, _JITTER_DOMAIN, k])
            mix = normalize_power(mix + jrng.normal(0.0, key.jitter_std, mix.shape))
        out[k] = mix
    return out


def make_watermark_trainset(ds: RfDataset, key: WatermarkKey) -> list[IqFrame]:
    """``variant_count`` jittered re-draws of the watermark sample, labeled ``wm_class_id``."""
    return [IqFrame(v[0], v[1], key.wm_class_id, float("nan"), k)
            for k, v in enumerate(_trainset_array(ds, key))]


def make_queries(ds: RfDataset, key: WatermarkKey, count: int = DEFAULT_QUERIES) -> np.ndarray:
    """Verification queries, drawn from seeds disjoint from the training variants."""
    pools = _source_pools(ds, key)
    return np.stack([_mix(ds, key, pools, s) for s in query_seeds(key, count)]).astype(np.float32)


def oversampled_watermark(ds: RfDataset, key: WatermarkKey):
    """Watermark variants repeated to the mean per-class train count, as ``(x, y)``."""
    variants = _trainset_array(ds, key)
    train_labels = ds.labels[ds.indices("train")]
    per_class = int(round(train_labels.size / max(len(np.unique(train_labels)), 1)))
    idx = np.resize(np.arange(key.variant_count), max(per_class, key.variant_count))
    return variants[idx], np.full(idx.size, key.wm_class_id, dtype=np.int64)


def embed_watermark(ds: RfDataset, key: WatermarkKey, spec: ModelSpec, config: TrainConfig,
                    meta=None) -> Checkpoint:
    """Train a model whose head carries the watermark identity as class ``wm_class_id``."""
    if len(key.source_device_ids) < 2:
        raise ConfigError("embedding needs at least two source devices", ["source_device_ids"])
    if key.wm_class_id != ds.num_classes or spec.num_classes != ds.num_classes + 1:
        raise ConfigError(
            f"watermark class {key.wm_class_id} needs a {ds.num_classes + 1}-class model "
            f"(got {spec.num_classes})", ["num_classes"])
    extra = oversampled_watermark(ds, key)
    info = {"lineage": {"parent": None, "watermark_key_fingerprint": key.fingerprint()},
            "watermark": {"wm_class_id": key.wm_class_id, "variants": key.variant_count,
                          "oversampled_to": int(extra[1].size)}}
    info.update(meta or {})
    ckpt, _ = train(ds, spec, config, extra=extra, meta=info)
    return ckpt


@dataclass
class VerificationResult:
    success_rate: float
    false_positive_rate: float
    threshold: float
    fpr_limit: float
    verdict: str
    query_count: int
    benign_count: int
    query_hits: int = 0
    benign_hits: int = 0
    class_present: bool = True
    key_fingerprint: str = ""
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "VerificationResult":
        return cls(**d)


def verify_model(ckpt: Checkpoint, key: WatermarkKey, ds: RfDataset, threshold: float = DEFAULT_THRESHOLD,
                 fpr_limit: float = DEFAULT_FPR_LIMIT, num_queries: int = DEFAULT_QUERIES) -> VerificationResult:
    """Query-response consistency check of ``ckpt`` against ``key``.

    A model without a watermark output is a mismatch by construction.
    """
    test = ds.indices("test")
    benign = test[ds.labels[test] < ds.num_devices]
    if ckpt.num_classes <= key.wm_class_id:
        return VerificationResult(0.0, 0.0, threshold, fpr_limit, "mismatch", num_queries, int(benign.size),
                                  class_present=False, key_fingerprint=key.fingerprint(),
                                  notes=["model has no output for the watermark class"])
    queries = make_queries(ds, key, num_queries)
    q_hits = int((predict(ckpt, queries) == key.wm_class_id).sum())
    b_hits = int((predict(ckpt, ds.iq[benign]) == key.wm_class_id).sum()) if benign.size else 0
    success = q_hits / num_queries
    fpr = b_hits / benign.size if benign.size else 0.0
    verdict = "authentic" if success >= threshold and fpr <= fpr_limit else "mismatch"
    return VerificationResult(success, fpr, threshold, fpr_limit, verdict, num_queries, int(benign.size),
                              q_hits, b_hits, True, key.fingerprint())
