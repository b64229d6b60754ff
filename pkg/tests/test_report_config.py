import itertools
import json

import pytest

from rfforensics.config import ROOT_ENV, SCHEMA, default_text, load_config
from rfforensics.errors import ConfigError
from rfforensics.report import (CATEGORIES, COMPARISON_COLUMNS, CONCLUSIONS, INTEGRITY_NOTE, Evidence,
                                build_report, comparison_table, conclude, emit_report, load_report,
                                render_human, render_structured)

H = "ab" * 32


# -- conclusion table -------------------------------------------------------------

@pytest.mark.parametrize("hash_check, wm, malware, expected", [
    ("absent", None, None, "inconclusive"),
    ("match", None, False, "trusted"),
    ("absent", "authentic", False, "trusted"),
    ("match", None, None, "inconclusive"),
    ("match", "authentic", True, "malicious-function-detected"),
    ("absent", None, True, "malicious-function-detected"),
    ("mismatch", None, None, "identity-mismatch"),
    ("absent", "mismatch", False, "identity-mismatch"),
    ("mismatch", "authentic", False, "trusted"),
    ("match", "mismatch", False, "trusted"),
    ("mismatch", "mismatch", True, "malicious-function-detected"),
])
def test_conclusion_table(hash_check, wm, malware, expected):
    assert conclude(hash_check, wm, malware) == expected


def test_trusted_requires_identity_and_clean_malware_result():
    for h, wm, mal in itertools.product(("match", "mismatch", "absent"), (None, "authentic", "mismatch"),
                                        (None, False, True)):
        out = conclude(h, wm, mal)
        assert out in CONCLUSIONS
        if out == "trusted":
            assert (h == "match" or wm == "authentic") and mal is False
        if mal:
            assert out == "malicious-function-detected"


def test_conclusion_rejects_unknown_states():
    with pytest.raises(ConfigError):
        conclude("maybe")
    with pytest.raises(ConfigError):
        conclude("match", "unsure")


# -- report -----------------------------------------------------------------------

AUTH = {"success_rate": 1.0, "false_positive_rate": 0.0, "verdict": "authentic", "key_fingerprint": "f" * 64}
MAL = {"mode": "tsne-svm", "accuracy": 0.99, "recall": 1.0, "trigger_response": {"shift": 0.9},
       "malware_detected": True}


def test_vacuous_report_is_inconclusive():
    rep = build_report({"path": "m.ck", "content_hash": H})
    assert rep.conclusion == "inconclusive" and rep.evidence == []
    assert INTEGRITY_NOTE in rep.notes


def test_report_with_both_analyses():
    rep = build_report({"path": "m.ck", "content_hash": H}, "match", AUTH, MAL)
    assert rep.conclusion == "malicious-function-detected"
    cats = [e["category"] for e in rep.evidence]
    assert cats == ["authentication", "authentication", "malware"]
    assert rep.authentication["verdict"] == "authentic"


def test_structured_round_trip(tmp_path):
    extra = [Evidence("performance", {"clean_accuracy": 0.97})]
    rep = build_report({"path": "m.ck", "content_hash": H}, "absent", AUTH, None, extra, {"path": "l", "record_index": 3})
    emit_report(rep, tmp_path / "r.json", "structured")
    back = load_report(tmp_path / "r.json")
    assert back == rep
    assert render_structured(back) == (tmp_path / "r.json").read_text()
    assert json.loads(render_structured(rep))["schema"] == "rfforensics-report"


def test_human_render_deterministic(tmp_path):
    rep = build_report({"path": "m.ck", "content_hash": H}, "match", AUTH, MAL)
    text = render_human(rep)
    assert text == render_human(rep)
    assert "conclusion: malicious-function-detected" in text
    emit_report(rep, tmp_path / "r.txt", "human")
    assert (tmp_path / "r.txt").read_text() == text
    with pytest.raises(ConfigError):
        emit_report(rep, tmp_path / "r.x", "pdf")


def test_load_report_rejects_other_documents(tmp_path):
    (tmp_path / "r.json").write_text('{"schema": "other", "version": 1}')
    with pytest.raises(ConfigError):
        load_report(tmp_path / "r.json")


def test_evidence_category_checked():
    assert len(CATEGORIES) == 6
    with pytest.raises(ConfigError):
        Evidence("astrology")


def test_four_model_comparison_table():
    rows = [{"model": "baseline", "clean-acc": 0.99, "ASR": 0.1},
            {"model": "watermarked", "clean-acc": 0.99, "wm-success": 1.0},
            {"model": "backdoored", "clean-acc": 0.98, "ASR": 1.0, "detection-acc": 1.0},
            {"model": "both", "clean-acc": 0.98, "wm-success": 1.0, "ASR": 1.0, "detection-acc": 1.0}]
    text = comparison_table(rows)
    lines = text.splitlines()
    assert lines[0].split() == list(COMPARISON_COLUMNS)
    assert len(lines) == 2 + 4
    assert lines[2].split() == ["baseline", "0.9900", "-", "0.1000", "-"]


# -- config -----------------------------------------------------------------------

def test_defaults_without_file():
    cfg = load_config()
    assert cfg.get("data", "num_devices") == 10
    assert cfg.get("data", "split") == (0.7, 0.1, 0.2)
    assert cfg.get("backdoor", "window_start") is None
    assert cfg.get("report", "export_plots") is True


def test_default_text_parses_back_to_defaults(tmp_path):
    (tmp_path / "c.ini").write_text(default_text())
    assert load_config(tmp_path / "c.ini").values == load_config().values
    for section, keys in SCHEMA.items():
        assert f"[{section}]" in default_text()


def test_overrides_and_seed(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nepochs = 3\n")
    cfg = load_config(tmp_path / "c.ini", ["train.epochs=4", "detector.mode=mahalanobis"], seed=9)
    assert cfg.get("train", "epochs") == 4
    assert cfg.get("detector", "mode") == "mahalanobis"
    assert all(cfg.get(s, "seed") == 9 for s in SCHEMA if "seed" in SCHEMA[s])


def test_all_errors_reported_together(tmp_path):
    (tmp_path / "c.ini").write_text("[data]\nnum_devices = 1\nframe_len = abc\n[bogus]\nx = 1\n")
    with pytest.raises(ConfigError) as e:
        load_config(tmp_path / "c.ini", ["train.epochs=0", "nosuch"])
    assert set(e.value.fields) >= {"data.num_devices", "data.frame_len", "bogus", "train.epochs", "nosuch"}


@pytest.mark.parametrize("text", ["[data]\nsnr_min_db = 40\n", "[watermark]\nnum_sources = 3\n",
                                  "[data]\nsplit = 0.5,0.5\n", "[train]\nunknown_key = 1\n"])
def test_cross_field_and_unknown_keys(tmp_path, text):
    (tmp_path / "c.ini").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.ini")


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
    (tmp_path / "bad.ini").write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")


def test_root_env_override(tmp_path, monkeypatch):
    cfg = load_config(None, ["paths.root=/srv/a"])
    monkeypatch.delenv(ROOT_ENV, raising=False)
    assert cfg.path("x.ck") == "/srv/a/x.ck"
    monkeypatch.setenv(ROOT_ENV, str(tmp_path))
    assert cfg.path("x.ck") == str(tmp_path / "x.ck")
    assert cfg.path("/abs/y") == "/abs/y"
