"""AdamW with decoupled weight decay over named numpy parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerState", "adamw_step"]


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    *,
    no_decay: tuple[str, ...] = (),
) -> OptimizerState:
    """Update ``params`` in place.

    For 2-D tables, rows whose gradient is identically zero keep their moments
    and receive only the decay term.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        decay = 0.0 if name in no_decay else weight_decay
        if p.ndim == 2:
            rows = np.flatnonzero(np.any(g != 0, axis=1))
        else:
            rows = slice(None)
        m[rows] = beta1 * m[rows] + (1.0 - beta1) * g[rows]
        v[rows] = beta2 * v[rows] + (1.0 - beta2) * g[rows] ** 2
        adam = np.zeros_like(p)
        adam[rows] = (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + eps)
        p -= lr * (adam + decay * p)
    return state
