"""Soft-margin SVM trained with mini-batch Pegasos subgradient steps.

The linear model learns ``w`` and a bias in the input space. The RBF model
runs the kernelized variant of the same iteration: it keeps a count per
training point, and its decision function is a kernel expansion over those
points. In both cases the bias is handled as an extra constant feature and
regularized together with the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError

KERNELS = ("linear", "rbf")


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    lam: float
    meta: dict = field(default_factory=dict)
    kernel: str = "linear"
    gamma: float = 0.0
    support: np.ndarray | None = field(default=None, repr=False)
    dual_coef: np.ndarray | None = field(default=None, repr=False)

    def decision(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kernel == "linear":
            return x @ self.weights + self.bias
        return rbf_kernel(x, self.support, self.gamma) @ self.dual_coef + self.bias


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(d, 0.0))


def svm_objective(w, b, x, y, lam) -> float:
    """lam/2 * (|w|^2 + b^2) + mean hinge loss for the linear model."""
    margins = y * (x @ w + b)
    return float(0.5 * lam * (w @ w + b * b) + np.maximum(0.0, 1.0 - margins).mean())


def _kernel_objective(coef, gram, y, lam) -> float:
    f = gram @ coef
    return float(0.5 * lam * coef @ f + np.maximum(0.0, 1.0 - y * f).mean())


def _check(x, y, lam, kernel):
    if not lam > 0:
        raise ConfigError("lam must be positive", ["lam"])
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}", ["kernel"])
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DataError("x must be (N, k) with one label per row")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise DataError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise DataError("SVM training needs both classes")


def svm_train(x, y, lam: float = 1e-2, epochs: int = 30, seed: int = 0, batch_size: int = 16,
              kernel: str = "linear", gamma: float | None = None) -> SvmModel:
    """Pegasos on labels in {-1, +1}; returns the best iterate seen at an epoch end.

    ``gamma`` defaults to ``1 / (k * var(x))`` for the RBF kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check(x, y, lam, kernel)
    if kernel == "rbf":
        return _train_rbf(x, y, lam, epochs, seed, batch_size, gamma)
    n, k = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    w = np.zeros(k + 1)
    radius = 1.0 / np.sqrt(lam)
    best_w, best_obj = w.copy(), svm_objective(w[:k], w[k], x, y, lam)
    initial_obj = best_obj
    t = 0
    for epoch in range(epochs):
        order = np.random.default_rng([int(seed), epoch]).permutation(n)
        for start in range(0, n, batch_size):
            t += 1
            idx = order[start:start + batch_size]
            eta = 1.0 / (lam * t)
            viol = idx[y[idx] * (xa[idx] @ w) < 1.0]
            w = (1.0 - eta * lam) * w
            if viol.size:
                w = w + (eta / idx.size) * (y[viol] @ xa[viol])
            norm = np.linalg.norm(w)
            if norm > radius:
                w = w * (radius / norm)
        obj = svm_objective(w[:k], w[k], x, y, lam)
        if obj < best_obj:
            best_w, best_obj = w.copy(), obj
    meta = {"epochs": epochs, "seed": int(seed), "batch_size": batch_size, "steps": t,
            "objective": best_obj, "initial_objective": initial_obj}
    return SvmModel(best_w[:k].copy(), float(best_w[k]), lam, meta)


def _train_rbf(x, y, lam, epochs, seed, batch_size, gamma) -> SvmModel:
    n, k = x.shape
    if gamma is None:
        var = float(x.var())
        gamma = 1.0 / (k * var) if var > 0 else 1.0
    if not gamma > 0:
        raise ConfigError("gamma must be positive", ["gamma"])
    # the constant 1 adds the bias feature to the kernel
    gram = rbf_kernel(x, x, gamma) + 1.0
    counts = np.zeros(n)
    best_coef, best_obj = np.zeros(n), _kernel_objective(np.zeros(n), gram, y, lam)
    initial_obj = best_obj
    t = 0
    for epoch in range(epochs):
        order = np.random.default_rng([int(seed), epoch]).permutation(n)
        for start in range(0, n, batch_size):
            t += 1
            idx = order[start:start + batch_size]
            # margins of the current iterate w_t = (1 / (lam * t)) * sum_j counts_j y_j phi(x_j)
            f = gram[idx] @ (counts * y) / (lam * t)
            viol = idx[y[idx] * f < 1.0]
            counts[viol] += 1.0 / idx.size
        coef = counts * y / (lam * t)
        obj = _kernel_objective(coef, gram, y, lam)
        if obj < best_obj:
            best_coef, best_obj = coef.copy(), obj
    keep = np.flatnonzero(best_coef)
    meta = {"epochs": epochs, "seed": int(seed), "batch_size": batch_size, "steps": t,
            "objective": best_obj, "initial_objective": initial_obj, "support_count": int(keep.size)}
    return SvmModel(np.zeros(0), float(best_coef.sum()), lam, meta, "rbf", float(gamma),
                    x[keep].copy(), best_coef[keep].copy())


def svm_predict(model: SvmModel, x) -> np.ndarray:
    """sign of the decision value with 0 mapped to +1."""
    return np.where(model.decision(x) >= 0, 1, -1)
