"""Feature-based backdoor detection over last-hidden-layer activations.

Three modes share one report schema:

* ``tsne-svm``: clean and suspect features are embedded jointly with t-SNE, a
  kernel SVM is trained on a stratified 70% of the embedded points and scored
  on the remaining 30%. This is transductive; it cannot score new inputs.
* ``pca-svm``: PCA and the SVM are fitted on a 70% training split and applied
  unchanged to the held-out rows.
* ``mahalanobis``: a distance baseline is fitted on the clean frames only and
  every suspect frame is scored against it.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from ..nncore.checkpoint import Checkpoint
from ..nncore.training import extract_features, predict
from .mahalanobis import mahalanobis_detect, mahalanobis_fit
from .pca import pca_fit, pca_transform
from .svm import svm_predict, svm_train
from .tsne import tsne_embed

MODES = ("tsne-svm", "pca-svm", "mahalanobis")
TRAIN_FRACTION = 0.7
DETECTION_THRESHOLD = 0.9
RESPONSE_SHIFT_THRESHOLD = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    perplexity: float = 30.0
    tsne_iterations: int = 500
    pca_components: int = 10
    svm_lambda: float = 1e-4
    svm_epochs: int = 50
    svm_kernel: str = "rbf"
    tsne_init: str = "pca"
    percentile: float = 98.0
    mean_factor: float = 1.5
    shrinkage: float = 0.05
    calibration_folds: int = 5
    mahalanobis_mode: str = "mean"
    seed: int = 0

    def __post_init__(self):
        bad = []
        if not self.perplexity > 1:
            bad.append("perplexity")
        if self.tsne_iterations < 1:
            bad.append("tsne_iterations")
        if self.pca_components < 1:
            bad.append("pca_components")
        if not self.svm_lambda > 0:
            bad.append("svm_lambda")
        if self.svm_epochs < 1:
            bad.append("svm_epochs")
        if self.svm_kernel not in ("linear", "rbf"):
            bad.append("svm_kernel")
        if self.tsne_init not in ("random", "pca"):
            bad.append("tsne_init")
        if not 0 < self.percentile < 100:
            bad.append("percentile")
        if not self.mean_factor > 0:
            bad.append("mean_factor")
        if not 0 < self.shrinkage <= 1:
            bad.append("shrinkage")
        if self.calibration_folds < 0:
            bad.append("calibration_folds")
        if self.mahalanobis_mode not in ("mean", "max"):
            bad.append("mahalanobis_mode")
        if bad:
            raise ConfigError(f"invalid detector config: {', '.join(bad)}", bad)


@dataclass
class DetectionReport:
    mode: str
    clean_count: int
    suspect_count: int
    evaluated_count: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    false_flag_rate: float | None
    suspect_flag_fraction: float
    flagged_suspects: list
    trigger_response: dict
    malware_detected: bool
    params: dict
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)
    features: np.ndarray | None = field(default=None, repr=False, compare=False)
    ground_truth: np.ndarray | None = field(default=None, repr=False, compare=False)
    predicted: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        skip = {"embedding", "features", "ground_truth", "predicted"}
        return {k: v for k, v in asdict(self).items() if k not in skip}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        return cls(**d)

    @property
    def detection_score(self) -> float:
        return self.accuracy if self.accuracy is not None else self.suspect_flag_fraction


def stratified_split(labels: np.ndarray, fraction: float, seed: int):
    """Seeded per-class split; returns (train_idx, test_idx), both sorted."""
    rng = np.random.default_rng([int(seed), 0x5717])
    train = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        cut = int(round(fraction * idx.size))
        cut = min(max(cut, 1), idx.size - 1) if idx.size > 1 else idx.size
        train.append(idx[:cut])
    train = np.sort(np.concatenate(train))
    test = np.setdiff1d(np.arange(labels.size), train)
    return train, test


def _binary_metrics(truth: np.ndarray, pred: np.ndarray) -> dict:
    truth = truth.astype(bool)
    pred = pred.astype(bool)
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    n_neg = int(np.sum(~truth))
    return {
        "accuracy": float(np.mean(truth == pred)) if truth.size else None,
        "precision": tp / (tp + fp) if tp + fp else (1.0 if not truth.any() else 0.0),
        "recall": tp / (tp + fn) if tp + fn else None,
        "false_flag_rate": fp / n_neg if n_neg else None,
    }


def trigger_response(clean_pred: np.ndarray, suspect_pred: np.ndarray, num_classes: int) -> dict:
    """How strongly suspect predictions collapse onto one class compared with clean ones."""
    s_share = np.bincount(suspect_pred, minlength=num_classes) / max(suspect_pred.size, 1)
    c_share = np.bincount(clean_pred, minlength=num_classes) / max(clean_pred.size, 1)
    dom = int(np.argmax(s_share))
    return {"dominant_class": dom, "suspect_share": float(s_share[dom]),
            "clean_share": float(c_share[dom]), "shift": float(s_share[dom] - c_share[dom])}


def _standardize(train_rows: np.ndarray, x: np.ndarray) -> np.ndarray:
    mu = train_rows.mean(axis=0)
    sd = train_rows.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


def _svm_on(z: np.ndarray, y: np.ndarray, train: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    zs = _standardize(z[train], z)
    model = svm_train(zs[train], np.where(y[train], 1, -1), cfg.svm_lambda, cfg.svm_epochs, cfg.seed,
                      kernel=cfg.svm_kernel)
    return svm_predict(model, zs) > 0


def detect_features(clean_feat, suspect_feat, ground_truth=None, mode: str = "tsne-svm",
                    config: DetectorConfig | None = None) -> DetectionReport:
    """Detection on precomputed feature matrices (clean rows first, then suspect rows).

    ``ground_truth`` flags each suspect row as triggered (True) or clean; when
    absent every suspect row is assumed triggered for training purposes and
    only flag lists are reported.
    """
    cfg = config or DetectorConfig()
    if mode not in MODES:
        raise ConfigError(f"unknown detector mode {mode!r}; expected one of {', '.join(MODES)}", ["mode"])
    clean_feat = np.asarray(clean_feat, dtype=np.float64)
    suspect_feat = np.asarray(suspect_feat, dtype=np.float64)
    if clean_feat.ndim != 2 or clean_feat.shape[0] == 0:
        raise DataError("clean feature set is empty")
    if suspect_feat.ndim != 2 or suspect_feat.shape[0] == 0:
        raise DataError("suspect feature set is empty")
    if clean_feat.shape[1] != suspect_feat.shape[1]:
        raise DataError("clean and suspect features have different widths")
    for name, arr in (("clean", clean_feat), ("suspect", suspect_feat)):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{name} features contain non-finite values")
    n_c, n_s = clean_feat.shape[0], suspect_feat.shape[0]
    have_truth = ground_truth is not None
    s_truth = np.ones(n_s, dtype=bool) if not have_truth else np.asarray(ground_truth, dtype=bool)
    if s_truth.shape != (n_s,):
        raise DataError("ground truth needs one flag per suspect frame")
    x = np.vstack([clean_feat, suspect_feat])
    truth = np.concatenate([np.zeros(n_c, dtype=bool), s_truth])
    params = {"mode": mode, **asdict(cfg)}
    embedding = None

    if mode == "mahalanobis":
        base = mahalanobis_fit(clean_feat, cfg.percentile, cfg.mean_factor, cfg.shrinkage,
                               cfg.calibration_folds)
        flags, dist = mahalanobis_detect(base, suspect_feat, cfg.mahalanobis_mode)
        pred = np.concatenate([np.zeros(n_c, dtype=bool), flags])
        evaluated = np.arange(n_c, n_c + n_s)
        params.update(mean_threshold=base.mean_threshold, max_threshold=base.max_threshold)
    else:
        if len(np.unique(truth)) < 2:
            raise DataError("SVM detection needs both clean and triggered rows")
        train, evaluated = stratified_split(truth, TRAIN_FRACTION, cfg.seed)
        if mode == "tsne-svm":
            if x.shape[0] < 8:
                raise ConfigError("t-SNE needs at least 8 clean plus suspect rows", ["N"])
            emb = tsne_embed(_standardize(x, x), cfg.perplexity, cfg.tsne_iterations, cfg.seed,
                             init=cfg.tsne_init)
            z = embedding = emb.coords
            params["final_kl"] = emb.kl_history[-1]
        else:
            k = min(cfg.pca_components, train.size, x.shape[1])
            proj = pca_fit(x[train], k)
            z = pca_transform(proj, x)
            params["pca_components"] = k
            params["explained_variance"] = float(proj.explained_variance_ratio.sum())
        pred = _svm_on(z, truth, train, cfg)
        params["train_rows"] = int(train.size)

    m = _binary_metrics(truth[evaluated], pred[evaluated]) if have_truth else dict.fromkeys(
        ("accuracy", "precision", "recall", "false_flag_rate"))
    s_pred = pred[n_c:]
    return DetectionReport(
        mode=mode, clean_count=n_c, suspect_count=n_s, evaluated_count=int(evaluated.size),
        accuracy=m["accuracy"], precision=m["precision"], recall=m["recall"],
        false_flag_rate=m["false_flag_rate"], suspect_flag_fraction=float(s_pred.mean()),
        flagged_suspects=[int(i) for i in np.flatnonzero(s_pred)], trigger_response={},
        malware_detected=False, params=params, embedding=embedding, features=x,
        ground_truth=truth, predicted=pred)


def detect_backdoor(ckpt: Checkpoint, clean_frames, suspect_frames, ground_truth=None,
                    mode: str = "tsne-svm", config: DetectorConfig | None = None) -> DetectionReport:
    """Extract last-hidden-layer features and run the chosen detector.

    The malware verdict requires both a detection score of at least 0.9 and
    suspect predictions concentrating on one class at least 0.5 more often
    than clean predictions do.
    """
    clean_feat = extract_features(ckpt, clean_frames)
    suspect_feat = extract_features(ckpt, suspect_frames)
    rep = detect_features(clean_feat, suspect_feat, ground_truth, mode, config)
    resp = trigger_response(predict(ckpt, clean_frames), predict(ckpt, suspect_frames), ckpt.num_classes)
    rep.trigger_response = resp
    rep.malware_detected = bool(rep.detection_score >= DETECTION_THRESHOLD
                                and resp["shift"] >= RESPONSE_SHIFT_THRESHOLD)
    rep.params["subject_hash"] = ckpt.content_hash
    return rep


def export_csv(report: DetectionReport, path, what: str = "embedding") -> None:
    """Write the embedding or the feature matrix, one row per sample.

    The final two columns are the ground-truth and predicted triggered flags.
    """
    if what == "embedding":
        if report.embedding is None:
            raise ConfigError(f"mode {report.mode} produces no embedding", ["export"])
        data, names = report.embedding, ["tsne_x", "tsne_y"]
    elif what == "features":
        if report.features is None:
            raise ConfigError("report carries no feature matrix", ["export"])
        data = report.features
        names = [f"f{j}" for j in range(data.shape[1])]
    else:
        raise ConfigError(f"unknown export {what!r}", ["export"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "source", *names, "ground_truth", "predicted"])
        for i, row in enumerate(data):
            src = "clean" if i < report.clean_count else "suspect"
            w.writerow([i, src, *(f"{v:.9g}" for v in row), int(report.ground_truth[i]), int(report.predicted[i])])
