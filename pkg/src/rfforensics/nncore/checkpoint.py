"""Checkpoint value, canonical content hash and the on-disk container.

File layout: ``b"RFCK"``, u32 LE header length, UTF-8 JSON header (format
version, model spec, train meta, weight manifest, content hash), then the raw
float32 little-endian weight payload in manifest order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, FormatError, TamperError
from .model import ModelSpec, check_weights, param_shapes

MAGIC = b"RFCK"
FORMAT_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def _lp(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def canonical_bytes(spec: ModelSpec, weights: dict, train_meta: dict) -> bytes:
    """Length-prefixed spec, meta and each weight (name, shape, f32 LE data)."""
    parts = [_lp(b"rfforensics-checkpoint-v1"), _lp(canonical_json(spec.to_dict())), _lp(canonical_json(train_meta))]
    for name in param_shapes(spec):
        arr = np.asarray(weights[name])
        parts.append(_lp(name.encode("ascii")))
        parts.append(_lp(struct.pack(f"<{arr.ndim}I", *arr.shape)))
        parts.append(_lp(arr.astype("<f4").tobytes()))
    return b"".join(parts)


def compute_hash(spec, weights, train_meta) -> str:
    return hashlib.sha256(canonical_bytes(spec, weights, train_meta)).hexdigest()


@dataclass
class Checkpoint:
    model_spec: ModelSpec
    weights: dict
    train_meta: dict = field(default_factory=dict)
    content_hash: str = ""
    tainted: bool = False

    @classmethod
    def create(cls, spec: ModelSpec, weights: dict, train_meta: dict) -> "Checkpoint":
        check_weights(spec, weights)
        weights = {k: np.asarray(weights[k], dtype=np.float32) for k in param_shapes(spec)}
        meta = json.loads(canonical_json(train_meta))
        return cls(spec, weights, meta, compute_hash(spec, weights, meta))

    @property
    def num_classes(self) -> int:
        return self.model_spec.num_classes

    def lineage(self) -> dict:
        return self.train_meta.get("lineage", {})

    def replace_meta(self, **updates) -> "Checkpoint":
        meta = dict(self.train_meta)
        meta.update(updates)
        return Checkpoint.create(self.model_spec, self.weights, meta)


def verify_hash(ckpt: Checkpoint) -> bool:
    try:
        return compute_hash(ckpt.model_spec, ckpt.weights, ckpt.train_meta) == ckpt.content_hash
    except Exception:
        return False


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in param_shapes(ckpt.model_spec):
        data = np.asarray(ckpt.weights[name]).astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(ckpt.weights[name].shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = canonical_json({
        "format_version": FORMAT_VERSION,
        "model_spec": ckpt.model_spec.to_dict(),
        "train_meta": ckpt.train_meta,
        "weights": manifest,
        "content_hash": ckpt.content_hash,
    })
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def checkpoint_from_bytes(blob: bytes, strict: bool = True) -> Checkpoint:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", "bad-magic")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    if len(blob) < 8 + hlen:
        raise FormatError("checkpoint header truncated", "truncated")
    try:
        raw = blob[8:8 + hlen]
        header = json.loads(raw.decode("utf-8"))
        if canonical_json(header) != raw:
            raise FormatError("checkpoint header is not canonical", "malformed")
        if header["format_version"] != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header['format_version']}", "version")
        try:
            spec = ModelSpec.from_dict(header["model_spec"])
        except ConfigError as exc:
            raise FormatError(f"checkpoint model spec is invalid: {exc}", "malformed") from exc
        payload = blob[8 + hlen:]
        # the manifest must be exactly what checkpoint_to_bytes writes: every
        # parameter in order, packed back to back, filling the payload
        shapes = param_shapes(spec)
        if [e["name"] for e in header["weights"]] != list(shapes):
            raise FormatError("weight manifest does not match the model spec", "malformed")
        weights, offset = {}, 0
        for entry in header["weights"]:
            shape = tuple(shapes[entry["name"]])
            n = 4 * int(np.prod(shape, dtype=np.int64))
            if set(entry) != {"name", "shape", "offset", "nbytes"} or tuple(entry["shape"]) != shape \
                    or entry["offset"] != offset or entry["nbytes"] != n:
                raise FormatError(f"weight manifest entry {entry['name']} is inconsistent", "malformed")
            if offset + n > len(payload):
                raise FormatError("weight payload truncated", "truncated")
            weights[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4,
                                                   offset=offset).reshape(shape).astype(np.float32)
            offset += n
        if offset != len(payload):
            raise FormatError("trailing bytes after the weight payload", "malformed")
        ckpt = Checkpoint(spec, weights, header["train_meta"], str(header["content_hash"]))
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}", "malformed") from exc
    if not verify_hash(ckpt):
        ckpt = dataclasses.replace(ckpt, tainted=True)
        if strict:
            raise TamperError("checkpoint content hash mismatch", artifact=ckpt)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, strict: bool = True) -> Checkpoint:
    """Read a checkpoint.

    On a hash mismatch, ``strict`` raises :class:`TamperError` whose
    ``artifact`` is the decoded checkpoint flagged ``tainted``; otherwise the
    tainted checkpoint is returned directly.
    """
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), strict=strict)
