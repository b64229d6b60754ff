"""Mahalanobis-distance outlier scoring against a clean feature baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError

SHRINKAGE = 0.05
MEAN_FACTOR = 1.5
PERCENTILE = 98.0
FOLDS = 5


@dataclass
class MahalanobisBaseline:
    mean: np.ndarray
    inv_cov: np.ndarray
    mean_threshold: float
    max_threshold: float
    percentile: float = PERCENTILE
    mean_factor: float = MEAN_FACTOR
    shrinkage: float = SHRINKAGE


def shrunk_covariance(x: np.ndarray, gamma: float = SHRINKAGE) -> np.ndarray:
    """(1 - gamma) * S + gamma * trace(S) / F * I."""
    f = x.shape[1]
    cov = np.cov(x, rowvar=False).reshape(f, f)
    mu = np.trace(cov) / f
    if mu <= 0:
        mu = 1.0
    return (1.0 - gamma) * cov + gamma * mu * np.eye(f)


def mahalanobis_distances(mean, inv_cov, x) -> np.ndarray:
    d = np.asarray(x, dtype=np.float64) - mean
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", d, inv_cov, d), 0.0))


def _inverse_and_mean(x: np.ndarray, shrinkage: float):
    cov = shrunk_covariance(x, shrinkage)
    chol = np.linalg.cholesky(cov)
    inv_chol = np.linalg.solve(chol, np.eye(cov.shape[0]))
    inv_cov = inv_chol.T @ inv_chol
    return x.mean(axis=0), 0.5 * (inv_cov + inv_cov.T)


def calibration_distances(clean: np.ndarray, shrinkage: float = SHRINKAGE, folds: int = FOLDS) -> np.ndarray:
    """Distance of every clean row to a baseline fitted without it.

    Rows are dealt round-robin into ``folds`` folds and each fold is scored
    against the other folds. In-sample distances run small when the feature
    dimension is not tiny next to the row count, which would push the false
    flag rate on unseen clean data above the nominal percentile.
    ``folds < 2`` (or too few rows) falls back to in-sample distances.
    """
    n = clean.shape[0]
    if folds < 2 or n < 2 * folds:
        mean, inv_cov = _inverse_and_mean(clean, shrinkage)
        return mahalanobis_distances(mean, inv_cov, clean)
    fold = np.arange(n) % folds
    d = np.empty(n)
    for k in range(folds):
        mean, inv_cov = _inverse_and_mean(clean[fold != k], shrinkage)
        d[fold == k] = mahalanobis_distances(mean, inv_cov, clean[fold == k])
    return d


def mahalanobis_fit(clean, percentile: float = PERCENTILE, mean_factor: float = MEAN_FACTOR,
                    shrinkage: float = SHRINKAGE, folds: int = FOLDS) -> MahalanobisBaseline:
    """Fit mean and shrunk inverse covariance on all clean rows.

    Both thresholds are calibrated on out-of-fold clean distances (see
    :func:`calibration_distances`): the mean threshold is ``mean_factor``
    times their mean and the max threshold their ``percentile``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 2 or clean.shape[0] < 2:
        raise DataError("Mahalanobis baseline needs at least two clean rows")
    if not 0 < percentile < 100:
        raise ConfigError("percentile must lie in (0, 100)", ["percentile"])
    if not 0 < shrinkage <= 1:
        raise ConfigError("shrinkage must lie in (0, 1]", ["shrinkage"])
    mean, inv_cov = _inverse_and_mean(clean, shrinkage)
    d = calibration_distances(clean, shrinkage, folds)
    return MahalanobisBaseline(mean, inv_cov, float(mean_factor * d.mean()),
                               float(np.percentile(d, percentile)), percentile, mean_factor, shrinkage)


def mahalanobis_detect(baseline: MahalanobisBaseline, x, mode: str = "mean"):
    """Per-row anomaly flags and distances; ``mode`` picks the mean or max threshold."""
    if mode not in ("mean", "max"):
        raise ConfigError(f"unknown Mahalanobis mode {mode!r}", ["mode"])
    d = mahalanobis_distances(baseline.mean, baseline.inv_cov, x)
    thr = baseline.mean_threshold if mode == "mean" else baseline.max_threshold
    return d > thr, d
