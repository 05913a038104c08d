"""Adam optimizer with bias correction over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# pre-training default, overridable everywhere it is used
PRETRAIN_LEARNING_RATE = 1e-4


@dataclass
class AdamHyper:
    learning_rate: float = PRETRAIN_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    hyper: AdamHyper
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor], hyper: AdamHyper | None = None) -> "AdamState":
        hyper = hyper or AdamHyper()
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(hyper=hyper, m=m, v=v, t=0)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, learning_rate: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters with no entry in ``grads`` are treated as zero-gradient (their
    moments decay; a fresh state leaves them untouched). ``learning_rate``
    overrides the state's hyper value for schedules.
    """
    lr = state.hyper.learning_rate if learning_rate is None else learning_rate
    b1, b2, eps = state.hyper.beta1, state.hyper.beta2, state.hyper.epsilon
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for '{name}'")
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ValueError(f"adam_step: moment shape mismatch for '{name}'")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return state
