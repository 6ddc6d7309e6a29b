"""Adam over named parameter arrays.

Standard update with bias correction; moments are kept in float64 regardless
of the parameter dtype so the recurrence is exact in verification runs, and
the computed update is cast back into the parameter array in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when gradients or the loss stop being finite."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], lr: float = 1e-4, **kwargs) -> AdamState:
    state = AdamState(lr=lr, **kwargs)
    for name, p in params.items():
        state.m[name] = np.zeros(p.shape, dtype=np.float64)
        state.v[name] = np.zeros(p.shape, dtype=np.float64)
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One Adam update, in place on the parameter arrays; returns the state."""
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged gradient in {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        np.subtract(p, update, out=p, casting="unsafe")
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = np.asarray(grads[name]) * scale
    return norm
