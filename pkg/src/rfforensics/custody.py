"""Hash-chained, append-only custody ledger.

One record per line, each a compact JSON object with fields in a fixed order.
``record_hash`` is SHA-256 over the length-prefixed encoding of every earlier
field, and ``parent_record_hash`` links to the previous record (64 zeros for
the first). The chain gives integrity evidence only: anyone able to rewrite
the whole file can forge a consistent chain, since records are not signed.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import ConfigError, TamperError

GENESIS_PARENT = "0" * 64
EVENT_TYPES = ("dataset-created", "trained", "watermarked", "poisoned", "finetuned",
               "verified", "detected", "deployed")
FIELDS = ("index", "timestamp_utc", "event_type", "subject_hash", "detail",
          "parent_record_hash", "record_hash")
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        raise ConfigError("custody timestamps must be timezone-aware", ["timestamp_utc"])
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _detail_json(detail: dict) -> str:
    try:
        return json.dumps(detail, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"custody detail is not canonical JSON: {exc}", ["detail"]) from exc


def _lp(text: str) -> bytes:
    b = text.encode("utf-8")
    return struct.pack("<Q", len(b)) + b


@dataclass(frozen=True)
class CustodyRecord:
    index: int
    timestamp_utc: str
    event_type: str
    subject_hash: str
    detail: dict = field(default_factory=dict)
    parent_record_hash: str = GENESIS_PARENT
    record_hash: str = ""

    def hash_input(self) -> bytes:
        return b"".join([_lp(str(self.index)), _lp(self.timestamp_utc), _lp(self.event_type),
                         _lp(self.subject_hash), _lp(_detail_json(self.detail)), _lp(self.parent_record_hash)])

    def compute_hash(self) -> str:
        return hashlib.sha256(self.hash_input()).hexdigest()

    def to_line(self) -> str:
        parts = [f'"index":{int(self.index)}']
        for name in FIELDS[1:]:
            value = getattr(self, name)
            enc = _detail_json(value) if name == "detail" else json.dumps(value, ensure_ascii=True)
            parts.append(f'"{name}":{enc}')
        return "{" + ",".join(parts) + "}"

    @classmethod
    def from_line(cls, line: str) -> "CustodyRecord":
        d = json.loads(line)
        if not isinstance(d, dict) or tuple(d) != FIELDS:
            raise ValueError("record fields missing or out of order")
        if not isinstance(d["index"], int) or not isinstance(d["detail"], dict):
            raise ValueError("bad field types")
        return cls(**d)


@dataclass
class ChainStatus:
    valid: bool
    first_bad_index: int | None
    record_count: int
    reason: str = ""

    def to_dict(self) -> dict:
        return {"valid": self.valid, "first_bad_index": self.first_bad_index,
                "record_count": self.record_count, "reason": self.reason}


def _read_lines(path) -> list[str]:
    """Raw record lines; a missing file is an empty ledger. Other I/O errors propagate."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return []
    if not data:
        return []
    text = data.decode("utf-8", errors="surrogateescape")
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def _check_lines(lines) -> tuple[ChainStatus, list[CustodyRecord]]:
    records = []
    parent = GENESIS_PARENT
    for k, line in enumerate(lines):
        try:
            rec = CustodyRecord.from_line(line)
        except (ValueError, TypeError, ConfigError):
            return ChainStatus(False, k, len(lines), "unparseable record"), records
        if rec.to_line() != line:
            return ChainStatus(False, k, len(lines), "non-canonical serialization"), records
        if rec.index != k:
            return ChainStatus(False, k, len(lines), "index out of sequence"), records
        if rec.parent_record_hash != parent:
            return ChainStatus(False, k, len(lines), "parent link broken"), records
        if rec.compute_hash() != rec.record_hash:
            return ChainStatus(False, k, len(lines), "record hash mismatch"), records
        records.append(rec)
        parent = rec.record_hash
    return ChainStatus(True, None, len(lines)), records


def verify_chain(path) -> ChainStatus:
    """Recompute every hash and parent link; report the first inconsistent record."""
    return _check_lines(_read_lines(path))[0]


def read_ledger(path) -> list[CustodyRecord]:
    """All records of a verified ledger; raises :class:`TamperError` otherwise."""
    status, records = _check_lines(_read_lines(path))
    if not status.valid:
        raise TamperError(f"custody ledger fails verification at record {status.first_bad_index} "
                          f"({status.reason})", index=status.first_bad_index)
    return records


class _Lock:
    def __init__(self, path):
        self.path = f"{path}.lock"

    def __enter__(self):
        self.fh = open(self.path, "a")
        fcntl.flock(self.fh, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self.fh, fcntl.LOCK_UN)
        self.fh.close()


def append_event(path, event_type: str, subject_hash: str, detail: dict | None = None,
                 clock=utc_now) -> CustodyRecord:
    """Chain a new record to the tail; refuses when the existing ledger does not verify.

    The file is rewritten through a temporary file and an atomic rename under
    an exclusive lock, so readers see either the old or the new ledger.
    """
    if event_type not in EVENT_TYPES:
        raise ConfigError(f"unknown custody event {event_type!r}", ["event_type"])
    if not isinstance(subject_hash, str) or not _HEX64.match(subject_hash):
        raise ConfigError("subject_hash must be 64 lowercase hex characters", ["subject_hash"])
    detail = dict(detail or {})
    _detail_json(detail)
    with _Lock(path):
        records = read_ledger(path)
        parent = records[-1].record_hash if records else GENESIS_PARENT
        rec = CustodyRecord(len(records), format_timestamp(clock()), event_type, subject_hash,
                            json.loads(_detail_json(detail)), parent)
        rec = CustodyRecord(**{**rec.__dict__, "record_hash": rec.compute_hash()})
        body = "".join(r.to_line() + "\n" for r in records) + rec.to_line() + "\n"
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(body)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    return rec


def query_history(path, subject_hash: str) -> list[CustodyRecord]:
    """Records about ``subject_hash`` in index order (the ledger must verify)."""
    return [r for r in read_ledger(path) if r.subject_hash == subject_hash]
