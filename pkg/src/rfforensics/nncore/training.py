"""Training, evaluation, feature extraction and fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .. import __version__
from ..errors import ConfigError, DataError, ShapeError
from ..rfdata import IqFrame, RfDataset, stack_frames
from . import layers as L
from .checkpoint import Checkpoint
from .model import (ModelSpec, forward, init_head_rows, init_weights, is_buffer,
                    loss_grad_forward, param_shapes)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

EVAL_BATCH = 512


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_prefix_stages: int = 0

    def __post_init__(self):
        bad = []
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.epochs < 0:
            bad.append("epochs")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                bad.append(name)
        if not self.adam_eps > 0:
            bad.append("adam_eps")
        if self.freeze_prefix_stages < 0:
            bad.append("freeze_prefix_stages")
        if bad:
            raise ConfigError(f"invalid training config: {', '.join(bad)}", bad)

    def to_dict(self) -> dict:
        return asdict(self)


def predict_logits(spec: ModelSpec, weights, x, batch=EVAL_BATCH) -> np.ndarray:
    out = [forward(spec, weights, x[k:k + batch]).logits for k in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, spec.num_classes), dtype=np.float32)


def _features(spec, weights, x, batch=EVAL_BATCH) -> np.ndarray:
    out = [forward(spec, weights, x[k:k + batch], capture_features=True).features
           for k in range(0, len(x), batch)]
    return np.concatenate(out)


def predict(ckpt: Checkpoint, x) -> np.ndarray:
    x = _as_batch(ckpt.model_spec, x)
    return predict_logits(ckpt.model_spec, ckpt.weights, x).argmax(axis=1)


def _as_batch(spec: ModelSpec, frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        x = frames
    else:
        frames = list(frames)
        if frames and isinstance(frames[0], IqFrame):
            x = stack_frames(frames)
        else:
            x = np.asarray(frames)
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1:] != (2, spec.input_len):
        raise ShapeError("input", ("N>0", 2, spec.input_len), tuple(x.shape))
    return x


def fit(spec: ModelSpec, weights: dict, x, y, config: TrainConfig, val=None, frozen_units=0):
    """Mini-batch Adam on (x, y); returns ``(weights, history)``.

    Shuffling for epoch ``e`` uses ``default_rng([seed, e])``, so runs are
    reproducible bit-for-bit. ``val`` is an optional ``(x, y)`` pair scored
    after every epoch.
    """
    weights = dict(weights)
    state = AdamState()
    history = []
    n = len(x)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, res = loss_grad_forward(spec, weights, x[idx], y[idx], frozen_units=frozen_units)
            for name, value in res.running.items():
                weights[name] = value.astype(weights[name].dtype, copy=False)
            weights, state = adam_step(state, weights, grads, config.learning_rate,
                                       config.adam_beta1, config.adam_beta2, config.adam_eps)
            loss_sum += loss * len(idx)
            correct += int((res.logits.argmax(axis=1) == y[idx]).sum())
        entry = {"epoch": epoch + 1, "train_loss": loss_sum / n, "train_acc": correct / n}
        if val is not None and len(val[0]):
            entry["val_acc"] = float((predict_logits(spec, weights, val[0]).argmax(axis=1) == val[1]).mean())
        history.append(entry)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", entry["epoch"], entry["train_loss"],
                 entry["train_acc"], entry.get("val_acc"))
    return weights, history


def _check_labels(y, num_classes, what):
    if len(y) and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"{what} labels exceed model classes ({num_classes})", ["num_classes"])


def train(ds: RfDataset, spec: ModelSpec, config: TrainConfig, extra=None, meta=None):
    """Train from scratch on the train split (plus optional ``extra=(x, y)`` frames).

    Returns ``(checkpoint, history)``; the checkpoint is the final-epoch model.
    """
    expected = ds.num_classes if extra is None else max(ds.num_classes, int(np.max(extra[1])) + 1)
    if spec.num_classes != expected:
        raise ConfigError(f"model has {spec.num_classes} classes, data needs {expected}", ["num_classes"])
    if spec.input_len != ds.frame_len:
        raise ConfigError(f"model input length {spec.input_len} != frame length {ds.frame_len}", ["input_len"])
    x, y = ds.arrays("train")
    xv, yv = ds.arrays("val")
    if len(x) == 0 or len(xv) == 0:
        raise DataError("training requires non-empty train and val splits")
    if extra is not None:
        x = np.concatenate([x, np.asarray(extra[0], dtype=np.float32)])
        y = np.concatenate([y, np.asarray(extra[1], dtype=np.int64)])
    _check_labels(y, spec.num_classes, "training")
    weights = init_weights(spec, config.seed)
    weights, history = fit(spec, weights, x, y, config, val=(xv, yv))
    train_meta = {
        "toolkit_version": __version__,
        "config": config.to_dict(),
        "dataset_digest": ds.digest(),
        "epochs": config.epochs,
        "train_frames": int(len(x)),
        "final_metrics": history[-1] if history else {},
        "history": history,
        "weight_init": "kaiming-normal-fan-in",
        "lineage": {"parent": None},
    }
    train_meta.update(meta or {})
    return Checkpoint.create(spec, weights, train_meta), history


def evaluate(ckpt: Checkpoint, ds: RfDataset, split: str = "test"):
    """Accuracy and confusion matrix (rows: true label, columns: prediction)."""
    x, y = ds.arrays(split)
    if len(x) == 0:
        raise DataError(f"split {split!r} is empty")
    return confusion_from_predictions(y, predict(ckpt, x), ckpt.num_classes)


def confusion_from_predictions(y_true, y_pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return float(np.trace(cm) / cm.sum()), cm


def extract_features(ckpt: Checkpoint, frames) -> np.ndarray:
    """Last-hidden-layer (post global pooling, pre-dense) activations, one row per frame."""
    x = _as_batch(ckpt.model_spec, frames)
    return _features(ckpt.model_spec, ckpt.weights, x)


def fine_tune(ckpt: Checkpoint, new_ds: RfDataset, config: TrainConfig, extend_head: bool = True,
              meta=None) -> Checkpoint:
    """Continue training ``ckpt`` on ``new_ds`` with the first ``freeze_prefix_stages`` trunk units frozen.

    Labels beyond the current head add rows to the dense layer when
    ``extend_head``; other weights are retained.
    """
    spec = ckpt.model_spec
    x, y = new_ds.arrays("train")
    if len(x) == 0:
        raise DataError("fine-tuning requires a non-empty train split")
    if new_ds.frame_len != spec.input_len:
        raise ConfigError("fine-tuning frames do not match the model input length", ["input_len"])
    if config.freeze_prefix_stages > spec.num_units:
        raise ConfigError(f"cannot freeze {config.freeze_prefix_stages} of {spec.num_units} units",
                          ["freeze_prefix_stages"])
    needed = max(new_ds.num_classes, int(y.max()) + 1)
    weights = {k: v.copy() for k, v in ckpt.weights.items()}
    if needed > spec.num_classes:
        if not extend_head:
            raise ConfigError(f"data needs {needed} classes but the head has {spec.num_classes}",
                              ["num_classes"])
        rows = needed - spec.num_classes
        w_new, b_new = init_head_rows(spec, rows, seed=config.seed + 7919)
        weights["head.w"] = np.concatenate([weights["head.w"], w_new])
        weights["head.b"] = np.concatenate([weights["head.b"], b_new])
        spec = spec.with_classes(needed)
    xv, yv = new_ds.arrays("val")
    weights, history = fit(spec, weights, x, y, config, val=(xv, yv) if len(xv) else None,
                           frozen_units=config.freeze_prefix_stages)
    train_meta = {
        "toolkit_version": __version__,
        "config": config.to_dict(),
        "dataset_digest": new_ds.digest(),
        "epochs": config.epochs,
        "train_frames": int(len(x)),
        "final_metrics": history[-1] if history else {},
        "history": history,
        "head_extended_by": needed - ckpt.num_classes if needed > ckpt.num_classes else 0,
        "lineage": {"parent": ckpt.content_hash, "parent_lineage": ckpt.lineage()},
    }
    train_meta.update(meta or {})
    return Checkpoint.create(spec, weights, train_meta)


def trainable_names(spec: ModelSpec):
    return [k for k in param_shapes(spec) if not is_buffer(k)]


def softmax_probs(ckpt: Checkpoint, x) -> np.ndarray:
    return L.softmax(predict_logits(ckpt.model_spec, ckpt.weights, _as_batch(ckpt.model_spec, x)))
