"""Finite-difference verification of the autodiff gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ValidationError
from . import tensor as T
from .layers import ParameterSet, _rng_for
from .tensor import Tensor


def gradient_check(
    model_fn: Callable[[], Tensor],
    params: ParameterSet,
    eps: float = 1e-5,
    n_sample: int = 64,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Samples up to `n_sample` coordinates per tensor from a deterministic
    generator.  `model_fn` must rebuild the forward graph from the current
    parameter values on every call and return a scalar loss.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"eps {eps} outside [1e-7, 1e-3]")
    params.zero_grads()
    loss = model_fn()
    T.backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
                for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.value.reshape(-1)
        n = flat.size
        rng = _rng_for(seed, f"gradcheck:{name}")
        coords = rng.choice(n, size=min(n_sample, n), replace=False) if n > n_sample else np.arange(n)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(model_fn().value)
            flat[c] = orig - eps
            f_minus = float(model_fn().value)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            denom = max(abs(a_flat[c]) + abs(numeric), 1e-6)
            worst = max(worst, abs(a_flat[c] - numeric) / denom)
    return worst
