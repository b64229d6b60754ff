"""Reusable experiment recipes: the desk-scale dataset and cross-device onboarding data."""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, DataError
from .backdoor import TriggerSpec, triggered_test_frames
from .rfdata import RfDataset, gen_dataset, split_dataset

DESK_DEVICES = 10
DESK_FRAMES = 400
DESK_FRAME_LEN = 256
REPLAY_FRACTION = 0.25


def desk_dataset(num_devices: int = DESK_DEVICES, frames_per_device: int = DESK_FRAMES,
                 frame_len: int = DESK_FRAME_LEN, seed: int = 0, snr_range_db=(10.0, 30.0),
                 ratios=(0.7, 0.1, 0.2)) -> RfDataset:
    """Generate and split the standard synthetic population."""
    ds = gen_dataset(num_devices, frames_per_device, frame_len, snr_range_db, master_seed=seed)
    return split_dataset(ds, ratios, seed=seed)


def onboarding_dataset(base: RfDataset, new_devices: int = 2, first_label: int | None = None,
                       replay_fraction: float = REPLAY_FRACTION, seed: int = 0) -> RfDataset:
    """Frames of ``new_devices`` devices unseen by ``base`` plus a replay slice of its train split.

    The new devices are the next indices of the same seeded population, so
    their impairments are drawn exactly as the original devices' were. Their
    labels start at ``first_label`` (default ``base.num_classes``) to leave
    room for any extra class already in the model head.
    """
    gen = base.manifest.get("generator")
    if gen is None:
        raise DataError("base dataset carries no generator parameters")
    if new_devices < 1:
        raise ConfigError("new_devices must be at least 1", ["new_devices"])
    if not 0 <= replay_fraction <= 1:
        raise ConfigError("replay_fraction must lie in [0, 1]", ["replay_fraction"])
    first_label = base.num_classes if first_label is None else int(first_label)
    if first_label < base.num_devices:
        raise ConfigError("new device labels would collide with existing devices", ["first_label"])
    total = base.num_devices + new_devices
    full = gen_dataset(total, gen["frames_per_device"], gen["frame_len"], gen["snr_range_db"],
                       master_seed=gen["master_seed"], ranges=gen["ranges"])
    fresh = full.subset(np.flatnonzero(full.labels >= base.num_devices))
    ratios = tuple(base.manifest.get("split", {}).get("ratios", (0.7, 0.1, 0.2)))
    fresh = split_dataset(fresh, ratios, seed=seed)
    fresh_labels = fresh.labels - base.num_devices + first_label

    train = base.indices("train")
    rng = np.random.default_rng([int(seed), 0x0B0A])
    keep = []
    for c in np.unique(base.labels[train]):
        idx = train[base.labels[train] == c]
        n = int(round(replay_fraction * idx.size))
        keep.append(np.sort(rng.choice(idx, size=n, replace=False)))
    replay = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    manifest = json.loads(json.dumps(base.manifest))
    manifest["onboarding"] = {"new_devices": new_devices, "first_label": first_label,
                              "replay_fraction": replay_fraction, "replay_frames": int(replay.size),
                              "seed": int(seed), "base_digest": base.digest()}
    manifest["profiles"] = full.manifest["profiles"]
    return RfDataset(
        iq=np.concatenate([base.iq[replay], fresh.iq]),
        labels=np.concatenate([base.labels[replay], fresh_labels]),
        snr_db=np.concatenate([base.snr_db[replay], fresh.snr_db]),
        frame_ids=np.concatenate([base.frame_ids[replay], fresh.frame_ids]),
        split=np.concatenate([base.split[replay], fresh.split]),
        num_devices=total, num_classes=first_label + new_devices,
        master_seed=base.master_seed, manifest=manifest)


def detection_sets(ds: RfDataset, spec: TriggerSpec, samples: int, seed: int):
    """Balanced clean test frames and triggered non-target test frames (same count each)."""
    test = ds.indices("test")
    xt, _ = triggered_test_frames(ds, spec)
    n = min(samples, test.size, len(xt))
    if n < 4:
        raise DataError("too few test frames for detection")
    rng = np.random.default_rng([int(seed), 0xDE7])
    clean = ds.iq[np.sort(rng.choice(test, n, replace=False))]
    trig = xt[np.sort(rng.choice(len(xt), n, replace=False))]
    return clean, trig
