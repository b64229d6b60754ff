"""Command-line workflows: data generation, training, watermarking, backdoors, detection, reports.

Every successful subcommand writes its artifacts, appends one custody record
and prints a single JSON summary line on stdout. Errors print one JSON line on
stderr and exit with 2 (config), 3 (data), 4 (tamper) or 5 (internal).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .backdoor import TriggerSpec, attack_metrics, load_trigger, poison_dataset, poisoned_mask, save_trigger
from .config import Config, default_text, load_config
from .custody import append_event, read_ledger, verify_chain
from .detector import DetectorConfig, detect_backdoor, export_csv
from .errors import ConfigError, DataError, ForensicsError, TamperError
from .nncore import (Checkpoint, TrainConfig, evaluate, fine_tune, load_checkpoint, preset,
                     save_checkpoint, train)
from .report import Evidence, build_report, comparison_table, conclude, emit_report, load_report
from .rfdata import RfDataset, gen_dataset, read_dataset, split_dataset, write_dataset
from .watermark import WatermarkKey, embed_watermark, load_key, make_key, save_key, verify_model
from .workflows import detection_sets, onboarding_dataset

log = logging.getLogger("rfforensics")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}", ["input"]) from exc


def _load_data(cfg: Config, path) -> RfDataset:
    ds = read_dataset(cfg.path(path))
    if not (ds.split >= 0).all():
        raise DataError(f"dataset {path} has frames without a split")
    return ds


def _load_model(cfg: Config, path) -> Checkpoint:
    return load_checkpoint(cfg.path(path), strict=True)


def _train_config(cfg: Config, section: str = "train", **extra) -> TrainConfig:
    s = cfg.section(section)
    return TrainConfig(learning_rate=s["learning_rate"], batch_size=cfg.get("train", "batch_size"),
                       epochs=s["epochs"], seed=s["seed"], **extra)


def _key(cfg: Config, path, num_devices: int | None = None, create: bool = False) -> WatermarkKey:
    full = cfg.path(path or cfg.get("watermark", "key_path"))
    if os.path.exists(full):
        return load_key(full)
    if not create:
        raise ConfigError(f"watermark key not found: {full}", ["watermark.key_path"])
    w = cfg.section("watermark")
    key = make_key(num_devices, w["seed"], w["num_sources"], w["weights"], w["variant_count"], w["jitter_std"])
    save_key(key, full)
    return key


def _trigger(cfg: Config, path, frame_len: int, create: bool = False) -> TriggerSpec:
    full = cfg.path(path or cfg.get("backdoor", "trigger_path"))
    if os.path.exists(full):
        return load_trigger(full)
    if not create:
        raise ConfigError(f"trigger file not found: {full}", ["backdoor.trigger_path"])
    b = cfg.section("backdoor")
    params = {k: b[k] for k in ("phase_shift_rad", "amp_scale", "target_class", "poison_ratio", "seed")}
    if b["window_start"] is not None:
        params["window_start"] = b["window_start"]
    if b["window_len"] is not None:
        params["window_len"] = b["window_len"]
    spec = TriggerSpec.default(frame_len, **params)
    save_trigger(spec, full)
    return spec


def _detector_config(cfg: Config) -> DetectorConfig:
    d = cfg.section("detector")
    return DetectorConfig(perplexity=d["perplexity"], tsne_iterations=d["tsne_iterations"],
                          pca_components=d["pca_components"], svm_lambda=d["svm_lambda"],
                          svm_epochs=d["svm_epochs"], svm_kernel=d["svm_kernel"], tsne_init=d["tsne_init"],
                          percentile=d["percentile"], mean_factor=d["mean_factor"], shrinkage=d["shrinkage"],
                          calibration_folds=d["calibration_folds"], mahalanobis_mode=d["mahalanobis_mode"], seed=d["seed"])


def _write_confusion(cm: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true_label", *[f"pred_{j}" for j in range(cm.shape[1])]])
        for i, row in enumerate(cm):
            w.writerow([i, *row.tolist()])


# -- subcommands ---------------------------------------------------------------
# Each returns (summary, (event_type, subject_hash, detail)).

def cmd_gen_data(cfg: Config, args):
    d = cfg.section("data")
    ds = gen_dataset(d["num_devices"], d["frames_per_device"], d["frame_len"],
                     (d["snr_min_db"], d["snr_max_db"]), master_seed=d["seed"])
    ds = split_dataset(ds, d["split"], seed=d["seed"])
    write_dataset(ds, cfg.path(args.out))
    h = sha256_file(cfg.path(args.out))
    counts = {s: int(ds.indices(s).size) for s in ("train", "val", "test")}
    detail = {"path": args.out, "frames": len(ds), "splits": counts, "generator": ds.manifest["generator"]}
    return {"dataset": args.out, "sha256": h, "frames": len(ds), **counts}, ("dataset-created", h, detail)


def cmd_train(cfg: Config, args):
    ds = _load_data(cfg, args.data)
    spec = preset(cfg.get("model", "preset"), ds.frame_len, ds.num_classes)
    ckpt, hist = train(ds, spec, _train_config(cfg))
    save_checkpoint(ckpt, cfg.path(args.out))
    acc, _ = evaluate(ckpt, ds, "test")
    detail = {"path": args.out, "dataset_sha256": sha256_file(cfg.path(args.data)),
              "test_accuracy": acc, "epochs": len(hist)}
    return ({"model": args.out, "content_hash": ckpt.content_hash, "test_accuracy": acc},
            ("trained", ckpt.content_hash, detail))


def cmd_eval(cfg: Config, args):
    ckpt = _load_model(cfg, args.model)
    ds = _load_data(cfg, args.data)
    acc, cm = evaluate(ckpt, ds, args.split)
    summary = {"model": args.model, "content_hash": ckpt.content_hash, "split": args.split, "accuracy": acc}
    if args.confusion_csv:
        _write_confusion(cm, cfg.path(args.confusion_csv))
        summary["confusion_csv"] = args.confusion_csv
    if args.trigger:
        spec = _trigger(cfg, args.trigger, ds.frame_len)
        m = attack_metrics(ckpt, ds, spec)
        summary.update(attack_success_rate=m.attack_success_rate, poison_ratio=spec.poison_ratio)
        if args.sweep_csv:
            path = cfg.path(args.sweep_csv)
            new = not os.path.exists(path)
            with open(path, "a", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(["model", "poison_ratio", "clean_accuracy", "attack_success_rate"])
                w.writerow([args.model, spec.poison_ratio, f"{m.clean_accuracy:.6f}", f"{m.attack_success_rate:.6f}"])
            summary["sweep_csv"] = args.sweep_csv
    detail = {"check": "evaluation", **{k: v for k, v in summary.items() if k != "content_hash"}}
    return summary, ("verified", ckpt.content_hash, detail)


def cmd_hash_verify(cfg: Config, args):
    ckpt = load_checkpoint(cfg.path(args.model), strict=False)
    consistent = not ckpt.tainted
    state = "match" if consistent else "mismatch"
    if args.reference_hash:
        if ckpt.content_hash != args.reference_hash.lower() or not consistent:
            state = "mismatch"
    summary = {"model": args.model, "content_hash": ckpt.content_hash, "self_consistent": consistent,
               "hash_check": state}
    event = ("verified", ckpt.content_hash, {"check": "hash", **summary})
    if state == "mismatch":
        # a tamper finding is still evidence: it is logged, then reported through the exit code
        summary["exit_code"] = TamperError.exit_code
    return summary, event


def cmd_finetune(cfg: Config, args):
    ckpt = _load_model(cfg, args.model)
    ds = _load_data(cfg, args.data)
    f = cfg.section("finetune")
    new = onboarding_dataset(ds, f["new_devices"], first_label=ckpt.num_classes,
                             replay_fraction=f["replay_fraction"], seed=f["seed"])
    tc = _train_config(cfg, "finetune", freeze_prefix_stages=f["freeze_prefix_stages"])
    tuned = fine_tune(ckpt, new, tc)
    save_checkpoint(tuned, cfg.path(args.out))
    acc, _ = evaluate(tuned, new, "test")
    detail = {"path": args.out, "parent": ckpt.content_hash, "new_devices": f["new_devices"],
              "onboarding_test_accuracy": acc}
    return ({"model": args.out, "content_hash": tuned.content_hash, "parent": ckpt.content_hash,
             "onboarding_test_accuracy": acc}, ("finetuned", tuned.content_hash, detail))


def _embed(cfg: Config, ds: RfDataset, key: WatermarkKey) -> Checkpoint:
    spec = preset(cfg.get("model", "preset"), ds.frame_len, ds.num_classes + 1)
    return embed_watermark(ds, key, spec, _train_config(cfg))


def _verify(cfg: Config, ckpt, key, ds):
    w = cfg.section("watermark")
    return verify_model(ckpt, key, ds, w["threshold"], w["fpr_limit"], w["num_queries"])


def cmd_wm_embed(cfg: Config, args):
    ds = _load_data(cfg, args.data)
    key = _key(cfg, args.key, ds.num_devices, create=True)
    ckpt = _embed(cfg, ds, key)
    save_checkpoint(ckpt, cfg.path(args.out))
    acc, _ = evaluate(ckpt, ds, "test")
    res = _verify(cfg, ckpt, key, ds)
    detail = {"path": args.out, "key_fingerprint": key.fingerprint(), "test_accuracy": acc,
              "wm_success": res.success_rate, "wm_fpr": res.false_positive_rate}
    return ({"model": args.out, "content_hash": ckpt.content_hash, "test_accuracy": acc,
             "wm_success": res.success_rate, "wm_fpr": res.false_positive_rate},
            ("watermarked", ckpt.content_hash, detail))


def cmd_wm_verify(cfg: Config, args):
    ckpt = _load_model(cfg, args.model)
    ds = _load_data(cfg, args.data)
    key = _key(cfg, args.key)
    res = _verify(cfg, ckpt, key, ds)
    conclusion = conclude("absent", res.verdict, None)
    if args.out:
        _write_json({"subject_hash": ckpt.content_hash, "result": res.to_dict()}, cfg.path(args.out))
    summary = {"model": args.model, "content_hash": ckpt.content_hash, "verdict": res.verdict,
               "success_rate": res.success_rate, "false_positive_rate": res.false_positive_rate,
               "conclusion": conclusion}
    detail = {"check": "watermark", "key_fingerprint": key.fingerprint(), **summary}
    return summary, ("verified", ckpt.content_hash, detail)


def cmd_poison(cfg: Config, args):
    ds = _load_data(cfg, args.data)
    spec = _trigger(cfg, args.trigger, ds.frame_len, create=True)
    out = poison_dataset(ds, spec)
    write_dataset(out, cfg.path(args.out))
    flags_path = args.out + ".flags.csv"
    with open(cfg.path(flags_path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "poisoned"])
        for fid, p in zip(out.frame_ids, poisoned_mask(out)):
            w.writerow([int(fid), int(p)])
    h = sha256_file(cfg.path(args.out))
    count = out.manifest["poison"]["count"]
    detail = {"path": args.out, "parent_dataset_sha256": sha256_file(cfg.path(args.data)),
              "poisoned_frames": count, "poison_ratio": spec.poison_ratio, "target_class": spec.target_class}
    return ({"dataset": args.out, "sha256": h, "poisoned_frames": count, "flags": flags_path},
            ("poisoned", h, detail))


def cmd_bd_train(cfg: Config, args):
    ds = _load_data(cfg, args.data)
    if not ds.manifest.get("poisoned_frame_ids"):
        raise DataError(f"{args.data} is not a poisoned dataset")
    detail = {"path": args.out, "dataset_sha256": sha256_file(cfg.path(args.data)),
              "poisoned_frames": len(ds.manifest["poisoned_frame_ids"])}
    if args.key:
        key = _key(cfg, args.key)
        ckpt = _embed(cfg, ds, key)
        detail["key_fingerprint"] = key.fingerprint()
    else:
        spec = preset(cfg.get("model", "preset"), ds.frame_len, ds.num_classes)
        ckpt, _ = train(ds, spec, _train_config(cfg))
    save_checkpoint(ckpt, cfg.path(args.out))
    return ({"model": args.out, "content_hash": ckpt.content_hash, "watermarked": bool(args.key)},
            ("trained", ckpt.content_hash, detail))


def cmd_bd_detect(cfg: Config, args):
    ckpt = _load_model(cfg, args.model)
    ds = _load_data(cfg, args.data)
    spec = _trigger(cfg, args.trigger, ds.frame_len)
    d = cfg.section("detector")
    mode = args.mode or d["mode"]
    clean, trig = detection_sets(ds, spec, d["samples"], d["seed"])
    rep = detect_backdoor(ckpt, clean, trig, np.ones(len(trig), dtype=bool), mode, _detector_config(cfg))
    _write_json({"subject_hash": ckpt.content_hash, "result": rep.to_dict()}, cfg.path(args.out))
    summary = {"model": args.model, "content_hash": ckpt.content_hash, "mode": mode, "accuracy": rep.accuracy,
               "recall": rep.recall, "trigger_shift": rep.trigger_response["shift"],
               "malware_detected": rep.malware_detected, "result": args.out}
    if cfg.get("report", "export_plots"):
        stem = os.path.splitext(args.out)[0]
        if rep.embedding is not None:
            export_csv(rep, cfg.path(stem + ".embedding.csv"), "embedding")
            summary["embedding_csv"] = stem + ".embedding.csv"
        export_csv(rep, cfg.path(stem + ".features.csv"), "features")
        summary["features_csv"] = stem + ".features.csv"
    detail = {k: v for k, v in summary.items() if k != "content_hash"}
    return summary, ("detected", ckpt.content_hash, detail)


def _result_for(path, cfg, ckpt, what):
    blob = _read_json(cfg.path(path))
    if blob.get("subject_hash") != ckpt.content_hash:
        raise DataError(f"{what} result {path} was produced for a different model")
    return blob["result"]


def cmd_report(cfg: Config, args):
    ckpt = load_checkpoint(cfg.path(args.model), strict=False)
    if args.reference_hash:
        match = ckpt.content_hash == args.reference_hash.lower() and not ckpt.tainted
        hash_check = "match" if match else "mismatch"
    else:
        hash_check = "mismatch" if ckpt.tainted else "absent"
    auth = _result_for(args.wm_result, cfg, ckpt, "watermark") if args.wm_result else None
    malware = _result_for(args.detect_result, cfg, ckpt, "detection") if args.detect_result else None
    extra = []
    if args.data:
        ds = _load_data(cfg, args.data)
        acc, _ = evaluate(ckpt, ds, "test")
        metrics = {"clean_accuracy": acc}
        if args.trigger:
            metrics["attack_success_rate"] = attack_metrics(ckpt, ds, _trigger(cfg, args.trigger, ds.frame_len)).attack_success_rate
        extra.append(Evidence("performance", metrics, {"dataset": args.data}))
    ledger = cfg.path(args.ledger or cfg.get("custody", "ledger"))
    ref = {"path": args.ledger or cfg.get("custody", "ledger"), "record_index": len(read_ledger(ledger))}
    rep = build_report({"content_hash": ckpt.content_hash, "path": args.model, "tainted": ckpt.tainted},
                       hash_check, auth, malware, extra, ref)
    fmt = args.format or cfg.get("report", "format")
    emit_report(rep, cfg.path(args.out), fmt)
    summary = {"model": args.model, "content_hash": ckpt.content_hash, "conclusion": rep.conclusion,
               "hash_check": hash_check, "report": args.out, "format": fmt}
    return summary, ("verified", ckpt.content_hash, {"check": "report", **summary})


def report_row(name: str, report) -> dict:
    """One comparison-table row from a structured report."""
    row = {"model": name}
    for e in report.evidence:
        if e["category"] == "performance":
            row["clean-acc"] = e["metrics"].get("clean_accuracy")
            row["ASR"] = e["metrics"].get("attack_success_rate")
    if report.authentication:
        row["wm-success"] = report.authentication["success_rate"]
    if report.malware:
        row["detection-acc"] = report.malware["accuracy"]
    return row


def cmd_compare(cfg: Config, args):
    names = args.names or [os.path.splitext(os.path.basename(p))[0] for p in args.reports]
    if len(names) != len(args.reports):
        raise ConfigError("one name per report is required", ["names"])
    rows = [report_row(n, load_report(cfg.path(p))) for n, p in zip(names, args.reports)]
    table = comparison_table(rows)
    if args.out:
        with open(cfg.path(args.out), "w", encoding="utf-8") as fh:
            fh.write(table)
    sys.stderr.write(table)
    digest = hashlib.sha256(table.encode()).hexdigest()
    return {"rows": rows, "table": args.out}, ("verified", digest, {"check": "comparison", "rows": rows})


def cmd_ledger_verify(cfg: Config, args):
    path = cfg.path(args.ledger or cfg.get("custody", "ledger"))
    status = verify_chain(path)
    if not status.valid:
        raise TamperError(f"ledger fails at record {status.first_bad_index}: {status.reason}",
                          index=status.first_bad_index)
    digest = sha256_file(path) if os.path.exists(path) else hashlib.sha256(b"").hexdigest()
    summary = {"ledger": args.ledger or cfg.get("custody", "ledger"), **status.to_dict()}
    return summary, ("verified", digest, {"check": "ledger", **status.to_dict()})


def cmd_show_config(cfg: Config, args):
    sys.stdout.write(default_text())
    return None, None


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "hash-verify": cmd_hash_verify,
    "finetune": cmd_finetune, "wm-embed": cmd_wm_embed, "wm-verify": cmd_wm_verify, "poison": cmd_poison,
    "bd-train": cmd_bd_train, "bd-detect": cmd_bd_detect, "report": cmd_report, "compare": cmd_compare,
    "ledger-verify": cmd_ledger_verify, "show-config": cmd_show_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    common.add_argument("--seed", type=int, help="replace every stage seed")
    common.add_argument("--ledger", help="custody ledger path (default: [custody] ledger)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="rfforensics", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate and split a synthetic dataset")
    s.add_argument("--out", required=True)
    s = sub.add_parser("train", parents=[common], help="train a clean classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s = sub.add_parser("eval", parents=[common], help="accuracy, confusion matrix and optional ASR")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--confusion-csv")
    s.add_argument("--trigger", help="also measure attack success for this trigger file")
    s.add_argument("--sweep-csv", help="append (ratio, clean acc, ASR) to this file; needs --trigger")
    s = sub.add_parser("hash-verify", parents=[common], help="check a checkpoint's content hash")
    s.add_argument("--model", required=True)
    s.add_argument("--reference-hash")
    s = sub.add_parser("finetune", parents=[common], help="onboard held-out devices into a model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="the dataset the model was trained on")
    s.add_argument("--out", required=True)
    s = sub.add_parser("wm-embed", parents=[common], help="train a watermarked model")
    s.add_argument("--data", required=True)
    s.add_argument("--key", help="key file; created from [watermark] when absent")
    s.add_argument("--out", required=True)
    s = sub.add_parser("wm-verify", parents=[common], help="verify a model against a watermark key")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--key")
    s.add_argument("--out", help="write the verification result here")
    s = sub.add_parser("poison", parents=[common], help="write a poisoned copy of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--trigger", help="trigger file; created from [backdoor] when absent")
    s.add_argument("--out", required=True)
    s = sub.add_parser("bd-train", parents=[common], help="train on a poisoned dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--key", help="also embed this watermark key")
    s.add_argument("--out", required=True)
    s = sub.add_parser("bd-detect", parents=[common], help="feature-based backdoor detection")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--trigger")
    s.add_argument("--mode", choices=("tsne-svm", "pca-svm", "mahalanobis"))
    s.add_argument("--out", required=True)
    s = sub.add_parser("report", parents=[common], help="compose a forensic report")
    s.add_argument("--model", required=True)
    s.add_argument("--wm-result")
    s.add_argument("--detect-result")
    s.add_argument("--reference-hash")
    s.add_argument("--data", help="add clean accuracy on this dataset's test split")
    s.add_argument("--trigger", help="with --data, add attack success rate")
    s.add_argument("--format", choices=("structured", "human"))
    s.add_argument("--out", required=True)
    s = sub.add_parser("compare", parents=[common], help="comparison table over structured reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--names", nargs="+")
    s.add_argument("--out")
    sub.add_parser("ledger-verify", parents=[common], help="verify the custody ledger")
    sub.add_parser("show-config", parents=[common], help="print the default configuration")
    return p


def _fail(exc: Exception, code: int) -> int:
    err = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError) and exc.fields:
        err["fields"] = exc.fields
    if isinstance(exc, TamperError) and exc.index is not None:
        err["first_bad_index"] = exc.index
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        summary, event = COMMANDS[args.command](cfg, args)
        if event is None:
            return 0
        ledger = args.ledger or cfg.get("custody", "ledger")
        rec = append_event(cfg.path(ledger), *event)
        code = summary.pop("exit_code", 0)
        line = {"command": args.command, "status": "ok" if code == 0 else "finding", **summary,
                "custody_index": rec.index}
        sys.stdout.write(json.dumps(line, sort_keys=True, allow_nan=False) + "\n")
        return code
    except ForensicsError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, DataError.exit_code)
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal exit code
        log.debug("internal error", exc_info=True)
        return _fail(exc, ForensicsError.exit_code)


if __name__ == "__main__":
    sys.exit(main())
