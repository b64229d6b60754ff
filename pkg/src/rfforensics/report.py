"""Forensic report: evidence items, the conclusion table and report output."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from . import __version__
from .errors import ConfigError

REPORT_SCHEMA = "rfforensics-report"
REPORT_VERSION = 1
CATEGORIES = ("authentication", "fingerprinting-ballistics", "identification-extraction",
              "performance", "malware", "chain-of-custody")
HASH_STATES = ("match", "mismatch", "absent")
CONCLUSIONS = ("trusted", "identity-mismatch", "malicious-function-detected", "inconclusive")
INTEGRITY_NOTE = ("The custody ledger is hash-chained for tamper evidence; records are not signed, "
                  "so it does not prove who wrote them.")


@dataclass
class Evidence:
    category: str
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown evidence category {self.category!r}", ["category"])


def conclude(hash_check: str = "absent", wm_verdict: str | None = None,
             malware_detected: bool | None = None) -> str:
    """Map evidence to a conclusion.

    ========================  =========================================
    malware detected          malicious-function-detected
    identity confirmed and    trusted
    malware analysed, clean
    identity contradicted     identity-mismatch
    anything else             inconclusive
    ========================  =========================================

    Identity is confirmed by a matching hash or an authentic watermark. It is
    contradicted when one of them fails and the other does not confirm it.
    """
    if hash_check not in HASH_STATES:
        raise ConfigError(f"hash_check must be one of {HASH_STATES}", ["hash_check"])
    if wm_verdict not in (None, "authentic", "mismatch"):
        raise ConfigError("watermark verdict must be authentic, mismatch or absent", ["authentication"])
    if malware_detected:
        return "malicious-function-detected"
    confirmed = hash_check == "match" or wm_verdict == "authentic"
    if confirmed and malware_detected is False:
        return "trusted"
    if not confirmed and (hash_check == "mismatch" or wm_verdict == "mismatch"):
        return "identity-mismatch"
    return "inconclusive"


@dataclass
class ForensicReport:
    subject: dict
    evidence: list
    authentication: dict | None
    malware: dict | None
    hash_check: str
    conclusion: str
    toolkit_version: str = __version__
    ledger_ref: dict = field(default_factory=dict)
    notes: list = field(default_factory=lambda: [INTEGRITY_NOTE])

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "ForensicReport":
        if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
            raise ConfigError("not a version-1 forensic report", ["schema"])
        body = {k: v for k, v in d.items() if k not in ("schema", "version")}
        body["evidence"] = [e if isinstance(e, dict) else asdict(e) for e in body["evidence"]]
        return cls(**body)


def build_report(subject: dict, hash_check: str = "absent", authentication: dict | None = None,
                 malware: dict | None = None, extra_evidence=(), ledger_ref=None) -> ForensicReport:
    """Assemble a report and derive its conclusion from the supplied evidence."""
    evidence = []
    if hash_check != "absent":
        evidence.append(Evidence("authentication", {"hash_check": hash_check},
                                 {"content_hash": subject.get("content_hash")}))
    if authentication is not None:
        evidence.append(Evidence("authentication", {
            "success_rate": authentication["success_rate"],
            "false_positive_rate": authentication["false_positive_rate"],
            "verdict": authentication["verdict"]}, {"key_fingerprint": authentication.get("key_fingerprint")}))
    if malware is not None:
        evidence.append(Evidence("malware", {
            "mode": malware["mode"], "accuracy": malware["accuracy"], "recall": malware["recall"],
            "trigger_shift": malware["trigger_response"].get("shift"),
            "malware_detected": malware["malware_detected"]}))
    evidence.extend(extra_evidence)
    conclusion = conclude(hash_check, authentication["verdict"] if authentication else None,
                          malware["malware_detected"] if malware else None)
    return ForensicReport(subject, [asdict(e) for e in evidence], authentication, malware, hash_check,
                          conclusion, ledger_ref=dict(ledger_ref or {}))


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_human(report: ForensicReport) -> str:
    lines = [
        "RF model forensic report",
        f"toolkit version: {report.toolkit_version}",
        f"subject: {report.subject.get('path', '-')} ({report.subject.get('content_hash', '-')})",
        f"conclusion: {report.conclusion}",
        f"hash check: {report.hash_check}",
    ]
    a = report.authentication
    lines.append("watermark: " + ("not analysed" if a is None else
                                  f"{a['verdict']} (success {_fmt(a['success_rate'])}, "
                                  f"fpr {_fmt(a['false_positive_rate'])})"))
    m = report.malware
    lines.append("malware: " + ("not analysed" if m is None else
                                f"{'detected' if m['malware_detected'] else 'not detected'} "
                                f"({m['mode']}, accuracy {_fmt(m['accuracy'])}, "
                                f"trigger shift {_fmt(m['trigger_response'].get('shift'))})"))
    lines.append("evidence:")
    for e in report.evidence:
        metrics = ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(e["metrics"].items()))
        lines.append(f"  [{e['category']}] {metrics}")
    if report.ledger_ref:
        lines.append(f"ledger: {report.ledger_ref.get('path', '-')} "
                     f"(record {report.ledger_ref.get('record_index', '-')})")
    lines.extend(f"note: {n}" for n in report.notes)
    return "\n".join(lines) + "\n"


def render_structured(report: ForensicReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report: ForensicReport, path, fmt: str = "structured") -> None:
    if fmt == "structured":
        text = render_structured(report)
    elif fmt == "human":
        text = render_human(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}", ["format"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_report(path) -> ForensicReport:
    with open(path, encoding="utf-8") as fh:
        try:
            return ForensicReport.from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed report: {exc}", ["report"]) from exc


COMPARISON_COLUMNS = ("model", "clean-acc", "wm-success", "ASR", "detection-acc")


def comparison_table(rows) -> str:
    """Plain-text table; each row is a mapping with the column names above (missing -> '-')."""
    table = [list(COMPARISON_COLUMNS)] + [[_fmt(r.get(c)) for c in COMPARISON_COLUMNS] for r in rows]
    widths = [max(len(row[j]) for row in table) for j in range(len(COMPARISON_COLUMNS))]
    out = []
    for i, row in enumerate(table):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
