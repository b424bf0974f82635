"""Adam with bias correction over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> tuple[dict, AdamState]:
    """One Adam update. Returns fresh parameter arrays; ``state`` is updated in place."""
    for name, p in params.items():
        if name not in grads:
            raise InvalidArgumentError(f"no gradient for parameter {name!r}")
        if np.shape(grads[name]) != np.shape(p):
            raise InvalidArgumentError(
                f"gradient shape {np.shape(grads[name])} does not match parameter {name!r} {np.shape(p)}"
            )
        if name in state.m and state.m[name].shape != np.shape(p):
            raise InvalidArgumentError(f"moment shape mismatch for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state
