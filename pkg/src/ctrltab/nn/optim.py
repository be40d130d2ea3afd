"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .layers import ParameterSet


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 0.0  # 0 disables clipping


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> AdamState:
    """Apply one update in place; returns the advanced state."""
    for name, g in grads.items():
        if np.any(np.isnan(g)):
            raise ValidationError(f"NaN gradient in tensor {name!r}; aborting update")
    grads = clip_global_norm(grads, hyper.grad_clip_norm)
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.value.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter {name} shape {p.value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - hyper.beta1**t)
        v_hat = v / (1 - hyper.beta2**t)
        p.value = p.value - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return state


def collect_grads(params: ParameterSet) -> dict[str, np.ndarray]:
    """Gradients for every parameter, zeros where a tensor was unused."""
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.items()
    }
