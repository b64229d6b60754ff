"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, weights: dict, grads: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Return ``(new_weights, new_state)``; tensors without a gradient are carried over unchanged.

    Moment buffers are created zero-filled the first time a tensor is seen.
    """
    t = state.step + 1
    new_w = dict(weights)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        w = weights[name]
        if g.shape != w.shape:
            raise ShapeError(name, w.shape, g.shape)
        mk = m.get(name)
        vk = v.get(name)
        if mk is None:
            mk = np.zeros_like(w)
            vk = np.zeros_like(w)
        elif mk.shape != w.shape:
            raise ShapeError(f"adam.m[{name}]", w.shape, mk.shape)
        mk = beta1 * mk + (1.0 - beta1) * g
        vk = beta2 * vk + (1.0 - beta2) * (g * g)
        m[name], v[name] = mk, vk
        new_w[name] = (w - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)).astype(w.dtype, copy=False)
    return new_w, AdamState(t, m, v)
