"""Central-difference gradient verification, always run in float64."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, precision


def grad_check(function: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` must map a Tensor to a scalar Tensor built from taped ops.
    ``coords`` optionally restricts the check to a subset of flat coordinate
    indices (the default checks every coordinate). Reports the error, never
    raises on a large one.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"grad_check: epsilon must be in [1e-6, 1e-3], got {epsilon}")
    base = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with precision(np.float64):
        x = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            out = function(x)
        if out.data.size != 1:
            raise ValueError("grad_check: function must be scalar-valued")
        backward(tape, out)
        analytic = (x.grad if x.grad is not None else np.zeros_like(base)).reshape(-1)

        flat = base.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = function(Tensor(base)).item()
            flat[i] = orig - epsilon
            f_minus = function(Tensor(base)).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            if err > worst:
                worst = err
        return worst
