"""Adam optimizer and exponential moving average of weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    """Non-finite values during optimization."""


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, iteration: int | None = None) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            where = state.step if iteration is None else iteration
            raise TrainingError(f"non-finite gradient for {name!r} at iteration {where}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= p.dtype.type(b1)
        m += p.dtype.type(1 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1 - b2) * g * g
        step = (m / p.dtype.type(c1)) / (np.sqrt(v / p.dtype.type(c2)) + p.dtype.type(state.epsilon))
        p -= p.dtype.type(state.learning_rate) * step


@dataclass
class EmaState:
    decay: float = 0.999
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def like(cls, params: dict[str, np.ndarray], decay: float) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
        return cls(decay, {k: v.copy() for k, v in params.items()})


def ema_update(ema: EmaState, params: dict[str, np.ndarray]) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow for {name!r} has shape {s.shape}, params {p.shape}")
        s *= s.dtype.type(ema.decay)
        s += s.dtype.type(1.0 - ema.decay) * p
