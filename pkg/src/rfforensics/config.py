"""Workbench configuration: one INI file with a section per stage.

Every key has a documented default, so an empty or missing file is valid.
Command-line overrides use ``section.key=value`` and are validated together
with the file; all violations are reported at once.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass

from .errors import ConfigError

ROOT_ENV = "RFF_ARTIFACT_ROOT"


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _optional_int(text: str):
    return None if text.strip() == "" else int(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default text, check or None, help)
SCHEMA = {
    "data": {
        "num_devices": (int, "10", lambda v: v >= 2, "number of simulated transmitters"),
        "frames_per_device": (int, "400", lambda v: v >= 10, "frames generated per device"),
        "frame_len": (int, "256", lambda v: v >= 16, "complex samples per frame"),
        "snr_min_db": (float, "10", math.isfinite, "lowest AWGN SNR in dB"),
        "snr_max_db": (float, "30", math.isfinite, "highest AWGN SNR in dB"),
        "split": (_floats, "0.7,0.1,0.2", lambda v: len(v) == 3 and min(v) > 0 and abs(sum(v) - 1) < 1e-9,
                  "train,val,test fractions"),
        "seed": (int, "0", lambda v: v >= 0, "master seed of the population and split"),
    },
    "model": {
        "preset": (str, "small", lambda v: v in ("tiny", "small", "resnet34-1d"), "network preset"),
    },
    "train": {
        "learning_rate": (float, "0.001", lambda v: v > 0, "Adam learning rate"),
        "batch_size": (int, "64", lambda v: v >= 1, "mini-batch size"),
        "epochs": (int, "15", lambda v: v >= 1, "training epochs"),
        "seed": (int, "0", lambda v: v >= 0, "weight-init and shuffling seed"),
    },
    "finetune": {
        "new_devices": (int, "2", lambda v: v >= 1, "held-out devices onboarded"),
        "epochs": (int, "5", lambda v: v >= 1, "fine-tuning epochs"),
        "learning_rate": (float, "0.001", lambda v: v > 0, "fine-tuning learning rate"),
        "freeze_prefix_stages": (int, "4", lambda v: v >= 0, "frozen units: stem plus leading stages"),
        "replay_fraction": (float, "0.25", lambda v: 0 <= v <= 1, "share of original train frames replayed"),
        "seed": (int, "0", lambda v: v >= 0, "fine-tuning seed"),
    },
    "watermark": {
        "key_path": (str, "watermark_key.json", None, "key file, created on wm-embed if absent"),
        "num_sources": (int, "4", lambda v: v >= 2, "source devices mixed"),
        "weights": (_floats, "0.4,0.3,0.2,0.1", lambda v: len(v) >= 2 and min(v) > 0 and abs(sum(v) - 1) < 1e-9,
                    "mixing weights, one per source"),
        "variant_count": (int, "200", lambda v: v >= 1, "jittered watermark variants"),
        "jitter_std": (float, "0.01", lambda v: v >= 0, "variant jitter standard deviation"),
        "threshold": (float, "0.9", lambda v: 0 < v <= 1, "success rate needed for authentic"),
        "fpr_limit": (float, "0.05", lambda v: 0 <= v < 1, "benign false-positive ceiling"),
        "num_queries": (int, "200", lambda v: v >= 1, "verification queries"),
        "seed": (int, "1", lambda v: v >= 0, "key seed"),
    },
    "backdoor": {
        "trigger_path": (str, "trigger.json", None, "trigger file, created on poison if absent"),
        "window_start": (_optional_int, "", lambda v: v is None or v >= 0, "blank means frame_len/4"),
        "window_len": (_optional_int, "", lambda v: v is None or v >= 1, "blank means frame_len/16"),
        "phase_shift_rad": (float, repr(math.pi / 4), math.isfinite, "trigger phase rotation"),
        "amp_scale": (float, "1.5", lambda v: v > 0, "trigger amplitude factor"),
        "target_class": (int, "0", lambda v: v >= 0, "attacker's target label"),
        "poison_ratio": (float, "0.3", lambda v: 0 < v < 1, "poisoned share of the train split"),
        "seed": (int, "0", lambda v: v >= 0, "poison selection seed"),
    },
    "detector": {
        "mode": (str, "tsne-svm", lambda v: v in ("tsne-svm", "pca-svm", "mahalanobis"), "detection mode"),
        "samples": (int, "360", lambda v: v >= 4, "clean and triggered frames each"),
        "perplexity": (float, "30", lambda v: v > 1, "t-SNE perplexity"),
        "tsne_iterations": (int, "500", lambda v: v >= 1, "t-SNE iterations"),
        "tsne_init": (str, "pca", lambda v: v in ("pca", "random"), "t-SNE initialization"),
        "pca_components": (int, "10", lambda v: v >= 1, "components for pca-svm"),
        "svm_kernel": (str, "rbf", lambda v: v in ("rbf", "linear"), "SVM kernel"),
        "svm_lambda": (float, "0.0001", lambda v: v > 0, "SVM regularization"),
        "svm_epochs": (int, "50", lambda v: v >= 1, "SVM epochs"),
        "percentile": (float, "98", lambda v: 0 < v < 100, "Mahalanobis max-threshold percentile"),
        "mean_factor": (float, "1.5", lambda v: v > 0, "Mahalanobis mean-threshold factor"),
        "shrinkage": (float, "0.05", lambda v: 0 < v <= 1, "covariance shrinkage"),
        "calibration_folds": (int, "5", lambda v: v >= 0, "folds for out-of-fold threshold calibration; <2 is in-sample"),
        "mahalanobis_mode": (str, "mean", lambda v: v in ("mean", "max"), "threshold used for flags"),
        "seed": (int, "0", lambda v: v >= 0, "sampling, t-SNE and SVM seed"),
    },
    "custody": {
        "ledger": (str, "custody.jsonl", None, "ledger file"),
    },
    "paths": {
        "root": (str, ".", None, f"artifact root; the {ROOT_ENV} environment variable wins"),
    },
    "report": {
        "format": (str, "structured", lambda v: v in ("structured", "human"), "report output format"),
        "export_plots": (_bool, "true", None, "write plot-ready CSV files"),
    },
}

SEED_KEYS = [(s, k) for s, keys in SCHEMA.items() for k in keys if k == "seed"]


@dataclass
class Config:
    values: dict
    source: str | None = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def section(self, section: str) -> dict:
        return dict(self.values[section])

    @property
    def root(self) -> str:
        return os.environ.get(ROOT_ENV) or self.values["paths"]["root"]

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.root, p)


def default_text() -> str:
    """The full default configuration with one comment per key."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, default, _, help_) in keys.items():
            out.append(f"# {help_}")
            out.append(f"{key} = {default}")
        out.append("")
    return "\n".join(out)


def load_config(path=None, overrides=(), seed: int | None = None) -> Config:
    """Parse, apply overrides and validate. ``seed`` replaces every stage seed."""
    parser = configparser.ConfigParser(interpolation=None)
    errors = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", ["config"])
        except configparser.Error as exc:
            raise ConfigError(f"config file does not parse: {exc}", ["config"]) from exc
    raw = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append((section, f"unknown section [{section}]"))
            continue
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                errors.append((f"{section}.{key}", "unknown key"))
            else:
                raw[section][key] = value
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or section not in SCHEMA or key not in SCHEMA[section]:
            errors.append((name.strip() or item, "override must be section.key=value for a known key"))
            continue
        raw[section][key] = value.strip()
    if seed is not None:
        for section, key in SEED_KEYS:
            raw[section][key] = str(seed)
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _, check, _) in keys.items():
            try:
                v = parse(raw[section][key])
            except ValueError as exc:
                errors.append((f"{section}.{key}", f"cannot parse {raw[section][key]!r} ({exc})"))
                continue
            if check is not None and not check(v):
                errors.append((f"{section}.{key}", f"value {raw[section][key]!r} out of range"))
                continue
            values[section][key] = v
    if not errors:
        if values["data"]["snr_min_db"] > values["data"]["snr_max_db"]:
            errors.append(("data.snr_min_db", "exceeds data.snr_max_db"))
        if len(values["watermark"]["weights"]) != values["watermark"]["num_sources"]:
            errors.append(("watermark.weights", "needs one weight per source device"))
    if errors:
        detail = "; ".join(f"{f}: {m}" for f, m in errors)
        raise ConfigError(f"invalid configuration: {detail}", [f for f, _ in errors])
    return Config(values, None if path is None else str(path))
