"""Central finite-difference verification of the analytic backward passes.

All checks run in float64. Each scalar objective is ``sum(out * R)`` for a
fixed random ``R`` (softmax-CE uses the loss directly), so every output
element contributes to the gradient being checked.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from . import model as M

STEP = 1e-4


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar ``f()`` with respect to array ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        hi = f()
        flat[k] = old - step
        lo = f()
        flat[k] = old
        gflat[k] = (hi - lo) / (2 * step)
    return g


def _check(f, analytic: dict, params: dict) -> float:
    return max(rel_error(analytic[k], numeric_grad(f, params[k])) for k in params)


def check_conv1d(rng) -> float:
    n, length, c_in, c_out = 2, int(rng.integers(5, 10)), 3, 4
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(n, length, c_in))
    w = rng.normal(size=(c_out, c_in, k))
    out, cache = L.conv1d_forward(x, w, stride)
    r = rng.normal(size=out.shape)
    dx, dw = L.conv1d_backward(r, w, cache)
    return _check(lambda: np.sum(L.conv1d_forward(x, w, stride)[0] * r), {"x": dx, "w": dw}, {"x": x, "w": w})


def check_batchnorm(rng) -> float:
    x = rng.normal(1.0, 2.0, size=(3, 5, 4))
    gamma = rng.normal(size=4)
    beta = rng.normal(size=4)
    rm, rv = np.zeros(4), np.ones(4)
    out, cache = L.batchnorm_forward(x, gamma, beta, rm, rv, True)
    r = rng.normal(size=out.shape)
    dx, dg, db = L.batchnorm_backward(r, cache)

    def f():
        return np.sum(L.batchnorm_forward(x, gamma, beta, rm, rv, True)[0] * r)
    return _check(f, {"x": dx, "gamma": dg, "beta": db}, {"x": x, "gamma": gamma, "beta": beta})


def check_residual_add(rng) -> float:
    a = rng.normal(size=(2, 6, 3))
    b = rng.normal(size=(2, 6, 3))
    r = rng.normal(size=a.shape)
    da, db = L.add_backward(r)
    return _check(lambda: np.sum(L.add_forward(a, b)[0] * r), {"a": da, "b": db}, {"a": a, "b": b})


def check_dense(rng) -> float:
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    out, cache = L.dense_forward(x, w, b)
    r = rng.normal(size=out.shape)
    dx, dw, db = L.dense_backward(r, w, cache)
    return _check(lambda: np.sum(L.dense_forward(x, w, b)[0] * r), {"x": dx, "w": dw, "b": db}, {"x": x, "w": w, "b": b})


def check_pooling(rng) -> float:
    x = rng.normal(size=(3, 7, 4))
    out, shape = L.gap_forward(x)
    r = rng.normal(size=out.shape)
    dx = L.gap_backward(r, shape)
    return _check(lambda: np.sum(L.gap_forward(x)[0] * r), {"x": dx}, {"x": x})


def check_softmax_ce(rng) -> float:
    logits = rng.normal(0.0, 2.0, size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    _, g = L.softmax_ce_forward(logits, labels)
    return _check(lambda: L.softmax_ce_forward(logits, labels)[0], {"logits": g}, {"logits": logits})


KINK_MARGIN = 1e-3


def check_model(rng, preset="tiny", input_len=8, num_classes=3, batch=3, max_draws=200) -> float:
    """Whole-network check on a small residual model in train mode.

    Draws are rejected until every ReLU input is at least ``KINK_MARGIN`` away
    from zero, so a ``STEP`` perturbation cannot cross a kink.
    """
    spec = M.preset(preset, input_len, num_classes)
    for _ in range(max_draws):
        weights = M.init_weights(spec, int(rng.integers(2 ** 31)), dtype=np.float64)
        for name in weights:
            if name.endswith(".beta") or name.endswith(".gamma") or name == "head.b":
                weights[name] = weights[name] + rng.normal(0.0, 0.1, weights[name].shape)
        x = rng.normal(size=(batch, 2, input_len))
        if M.relu_margin(spec, weights, x) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a kink-free model")
    y = rng.integers(0, num_classes, size=batch)
    _, grads = M.loss_and_grad(spec, weights, x, y)

    def f():
        return M.loss_and_grad(spec, weights, x, y)[0]
    trainable = {k: v for k, v in weights.items() if not M.is_buffer(k)}
    return _check(f, grads, trainable)


LAYER_CHECKS = {
    "conv1d": check_conv1d,
    "batchnorm": check_batchnorm,
    "residual_add": check_residual_add,
    "dense": check_dense,
    "pooling": check_pooling,
    "softmax_ce": check_softmax_ce,
    "model": check_model,
}


def run_checks(trials=20, seed=0, names=None) -> dict[str, float]:
    """Worst relative error per layer type over ``trials`` random draws."""
    worst = {}
    for name in names or LAYER_CHECKS:
        rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
        worst[name] = max(LAYER_CHECKS[name](rng) for _ in range(trials))
    return worst
