"""Layer primitives with explicit forward/backward passes.

Activations are channels-last, ``(N, L, C)``. Convolution weights use the
``(C_out, C_in, K)`` layout. Every ``*_forward`` returns ``(out, cache)`` and
the matching ``*_backward`` consumes that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_out_len(length: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (length + 2 * pad - kernel) // stride + 1


def conv1d_forward(x, w, stride=1):
    """Same-padded (``K // 2``) strided 1-D convolution without bias."""
    n, length, c_in = x.shape
    c_out, _, k = w.shape
    pad = k // 2
    l_out = conv_out_len(length, k, stride)
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :l_out]  # (N, Lout, Cin, K)
    cols = win.reshape(n * l_out, c_in * k)
    out = (cols @ w.reshape(c_out, c_in * k).T).reshape(n, l_out, c_out)
    return out, (cols, x.shape, stride)


def conv1d_backward(dout, w, cache):
    cols, (n, length, c_in), stride = cache
    c_out, _, k = w.shape
    pad = k // 2
    l_out = dout.shape[1]
    d2 = dout.reshape(n * l_out, c_out)
    dw = (d2.T @ cols).reshape(w.shape)
    dcols = (d2 @ w.reshape(c_out, c_in * k)).reshape(n, l_out, c_in, k)
    dxp = np.zeros((n, length + 2 * pad, c_in), dtype=dout.dtype)
    span = stride * (l_out - 1) + 1
    for j in range(k):
        dxp[:, j:j + span:stride] += dcols[:, :, :, j]
    return dxp[:, pad:pad + length], dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel normalization over batch and time.

    In train mode returns updated running statistics in the cache's
    ``"running"`` entry; eval mode uses the stored statistics.
    """
    if train:
        mean = x.mean(axis=(0, 1))
        xc = x - mean
        var = (xc * xc).mean(axis=(0, 1))
        m = x.shape[0] * x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        running = ((1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean,
                   (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased)
    else:
        xc = x - running_mean
        var = running_var
        running = None
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    out = xhat * gamma + beta
    return out, {"xhat": xhat, "inv": inv, "gamma": gamma, "train": train, "running": running}


def batchnorm_backward(dout, cache):
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    dgamma = (dout * xhat).sum(axis=(0, 1))
    dbeta = dout.sum(axis=(0, 1))
    dxhat = dout * gamma
    if cache["train"]:
        dx = inv * (dxhat - dxhat.mean(axis=(0, 1)) - xhat * (dxhat * xhat).mean(axis=(0, 1)))
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def add_forward(a, b):
    """Residual join. The backward pass routes the same gradient to both inputs."""
    return a + b, None


def add_backward(dout, _cache=None):
    return dout, dout


def gap_forward(x):
    return x.mean(axis=1), x.shape


def gap_backward(dout, shape):
    n, length, c = shape
    return np.broadcast_to(dout[:, None, :] / length, shape).copy()


def dense_forward(x, w, b):
    return x @ w.T + b, x


def dense_backward(dout, w, x):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_ce_forward(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
