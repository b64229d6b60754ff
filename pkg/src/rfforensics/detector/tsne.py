"""Exact t-SNE.

Gaussian input affinities are calibrated per point by bisection on the
precision so the conditional distribution's entropy equals log2(perplexity).
The joint P is symmetrized and normalized, and the 2-D map uses a Student-t
kernel. KL(P||Q) is minimized by gradient descent with momentum, per-parameter
gains and early exaggeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from .pca import pca_fit, pca_transform

ENTROPY_TOL_BITS = 1e-10
MAX_BISECTION = 200
_P_FLOOR = 1e-12


@dataclass
class Embedding:
    coords: np.ndarray
    kl_history: list
    params: dict
    P: np.ndarray | None = field(default=None, repr=False)
    row_entropy_bits: np.ndarray | None = field(default=None, repr=False)


def pairwise_sq_dists(x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Squared Euclidean distances from explicit differences (translation invariant)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    d = np.empty((n, n))
    for s in range(0, n, chunk):
        diff = x[s:s + chunk, None, :] - x[None, :, :]
        d[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return d


def _row_affinity(dist_row: np.ndarray, beta: float):
    z = -(dist_row - dist_row.min()) * beta
    p = np.exp(z)
    p /= p.sum()
    nz = p > 0
    h_bits = -np.sum(p[nz] * np.log2(p[nz]))
    return p, h_bits


def conditional_affinities(dist: np.ndarray, perplexity: float):
    """Row-stochastic P(j|i) with entropy log2(perplexity) per row; returns (P, entropies_bits)."""
    n = dist.shape[0]
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    ent = np.empty(n)
    for i in range(n):
        row = np.delete(dist[i], i)
        lo, hi = 0.0, np.inf
        beta = 1.0 / max(np.median(row), 1e-300)
        p, h = _row_affinity(row, beta)
        for _ in range(MAX_BISECTION):
            if abs(h - target) <= ENTROPY_TOL_BITS:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            p, h = _row_affinity(row, beta)
        P[i, np.arange(n) != i] = p
        ent[i] = h
    return P, ent


def joint_affinities(x: np.ndarray, perplexity: float):
    P_cond, ent = conditional_affinities(pairwise_sq_dists(x), perplexity)
    n = x.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n), ent


def _q_and_grad(P, Y):
    sq = np.sum(Y * Y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    W = (P - Q) * num
    grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
    return Q, grad


def kl_divergence(P, Q) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], _P_FLOOR))))


def tsne_embed(x, perplexity: float = 30.0, iterations: int = 500, seed: int = 0,
               learning_rate="auto", early_exaggeration: float = 12.0,
               exaggeration_iters: int = 100, momentum=(0.5, 0.8), momentum_switch: int = 250,
               min_gain: float = 0.01, init: str = "random", keep_affinities: bool = False) -> Embedding:
    """Embed the rows of ``x`` in 2-D. Deterministic for a given ``seed``.

    ``init="pca"`` starts from the top two principal components scaled to a
    1e-4 standard deviation, which keeps the global arrangement of clusters;
    ``"random"`` draws the start from N(0, 1e-4). ``learning_rate="auto"``
    uses max(N / (4 * early_exaggeration), 50); a fixed 200 overshoots badly
    on a few hundred points.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise DataError("t-SNE input must be a finite 2-D matrix")
    n = x.shape[0]
    if n < 8:
        raise ConfigError("t-SNE needs at least 8 points", ["N"])
    if not 1.0 < perplexity < (n - 1) / 3.0:
        raise ConfigError(f"perplexity must lie in (1, {(n - 1) / 3:.3g}) for {n} points", ["perplexity"])
    if learning_rate == "auto":
        learning_rate = max(n / (4.0 * early_exaggeration), 50.0)
    elif not (isinstance(learning_rate, (int, float)) and learning_rate > 0):
        raise ConfigError("learning_rate must be positive or 'auto'", ["learning_rate"])
    # offsets from one reference row: exact under translation whenever the subtraction is
    x = x - x[0]
    P, ent = joint_affinities(x, perplexity)
    if init == "pca":
        proj = pca_fit(x, 2)
        Y = pca_transform(proj, x)
        sd = Y[:, 0].std()
        Y = Y * (1e-4 / sd) if sd > 0 else np.zeros_like(Y)
    elif init == "random":
        Y = np.random.default_rng(int(seed)).normal(0.0, 1e-4, size=(n, 2))
    else:
        raise ConfigError(f"unknown t-SNE init {init!r}", ["init"])
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    prev = None
    step_scale = 1.0
    for it in range(iterations):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        Q, grad = _q_and_grad(P * exag, Y)
        # KL is always reported against the true P, also while exaggerating
        kl = kl_divergence(P, Q)
        if it > exaggeration_iters and kl > prev[0]:
            # uphill step: back to the last point, drop momentum and shrink the step
            kl, Y, grad = prev
            velocity = np.zeros_like(Y)
            gains = np.ones_like(Y)
            step_scale *= 0.5
        prev = (kl, Y, grad)
        history.append(kl)
        mom = momentum[0] if it < momentum_switch else momentum[1]
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, min_gain)
        velocity = mom * velocity - learning_rate * step_scale * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
    Q, _ = _q_and_grad(P, Y)
    kl = kl_divergence(P, Q)
    if prev is not None and iterations > exaggeration_iters and kl > prev[0]:
        kl, Y = prev[0], prev[1]
    history.append(kl)
    params = {"perplexity": perplexity, "iterations": iterations, "seed": int(seed),
              "learning_rate": float(learning_rate), "early_exaggeration": early_exaggeration,
              "exaggeration_iters": exaggeration_iters, "momentum": list(momentum),
              "momentum_switch": momentum_switch, "init": init}
    return Embedding(Y, history, params, P if keep_affinities else None, ent if keep_affinities else None)
