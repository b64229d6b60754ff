"""Principal component projection fitted on a reference feature matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError


@dataclass
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (k, F), orthonormal rows
    explained_variance: np.ndarray
    total_variance: float

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def pca_fit(x, k: int) -> PcaProjection:
    """Top-``k`` eigenvectors of the sample covariance (``N - 1`` denominator).

    Each component's largest-magnitude entry is made positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("PCA needs a matrix with at least two rows")
    n, f = x.shape
    if not 1 <= k <= min(n, f):
        raise ConfigError(f"k={k} must lie in [1, {min(n, f)}]", ["k"])
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(f, f)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order[:k]].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), pivot])[:, None]
    return PcaProjection(mean, comps, evals[:k], float(evals.sum()))


def pca_transform(proj: PcaProjection, x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - proj.mean) @ proj.components.T


def pca_inverse(proj: PcaProjection, z) -> np.ndarray:
    return np.asarray(z) @ proj.components + proj.mean
