"""Deterministic numpy engine for residual 1-D CNN classifiers."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, verify_hash
from .model import ModelSpec, loss_and_grad, model_forward, preset
from .optim import AdamState, adam_step
from .training import (TrainConfig, evaluate, extract_features, fine_tune, predict,
                       train)

__all__ = [
    "AdamState", "Checkpoint", "ModelSpec", "TrainConfig", "adam_step", "evaluate",
    "extract_features", "fine_tune", "load_checkpoint", "loss_and_grad", "model_forward",
    "predict", "preset", "save_checkpoint", "train", "verify_hash",
]
