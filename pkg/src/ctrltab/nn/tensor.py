"""Reverse-mode automatic differentiation over float64 numpy arrays.

A tape of `Tensor` nodes is built during the forward pass; `backward` walks
it in reverse topological order with a fixed accumulation order, so gradients
are bit-reproducible for a given graph.  Only the operations the encoder/
decoder stacks need are provided; each fused op (softmax, layer norm, cross
entropy) carries its own hand-derived backward rule.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError


class Tensor:
    __slots__ = ("value", "grad", "parents", "bw", "requires_grad", "name")

    def __init__(self, value, parents=(), bw=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self.bw = bw  # callable(grad_out) -> tuple of parent grads (None where absent)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape})"


def parameter(value, name: str) -> Tensor:
    t = Tensor(value, requires_grad=True, name=name)
    if not np.all(np.isfinite(t.value)):
        raise ValidationError(f"parameter {name} has non-finite entries")
    return t


def constant(value) -> Tensor:
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b))
    out.bw = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, (a, b))
    out.bw = lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    )
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.value * s, (a,))
    out.bw = lambda g: (g * s,)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value @ b.value, (a, b))

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)
        return ga, gb

    out.bw = bw
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.value.shape
    out = Tensor(a.value.reshape(shape), (a,))
    out.bw = lambda g: (g.reshape(orig),)
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(np.swapaxes(a.value, ax1, ax2), (a,))
    out.bw = lambda g: (np.swapaxes(g, ax1, ax2),)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from the embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    out = Tensor(table.value[ids], (table,))

    def bw(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids, g)
        return (grad,)

    out.bw = bw
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    x = a.value
    sq = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * sq))
    out = Tensor(0.5 * x * (1.0 + t), (a,))

    def bw(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    out.bw = bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (a,))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    out.bw = bw
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(xhat * gamma.value + beta.value, (a, gamma, beta))

    def bw(g):
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    out.bw = bw
    return out


def masked_mean(a: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Mean over positions where mask is true; mask is constant (B, L)."""
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim < a.value.ndim:
        m = m[..., None]
    counts = m.sum(axis=axis, keepdims=True)
    if np.any(counts == 0):
        raise ValidationError("masked_mean over an empty mask")
    out = Tensor((a.value * m).sum(axis=axis) / np.squeeze(counts, axis=axis), (a,))

    def bw(g):
        return (np.expand_dims(g, axis) * m / counts,)

    out.bw = bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.value.sum(), (a,))
    out.bw = lambda g: (np.full_like(a.value, g),)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean over non-pad steps of -log softmax(logits)[target].

    `logits` has class dimension last; `targets` holds integer ids of the same
    leading shape; `pad_mask` (same shape as targets) marks steps that count.
    Stabilized by max-subtraction.
    """
    targets = np.asarray(targets)
    n_classes = logits.value.shape[-1]
    if targets.shape != logits.value.shape[:-1]:
        raise ValidationError(f"targets shape {targets.shape} != logit steps {logits.value.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValidationError(f"target id outside [0,{n_classes}) in cross_entropy")
    if pad_mask is None:
        pad_mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(pad_mask, dtype=np.float64)
    n_valid = mask.sum()
    if n_valid == 0:
        raise ValidationError("cross_entropy with no unmasked steps")

    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - lse
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n_valid
    out = Tensor(loss, (logits,))

    def bw(g):
        probs = np.exp(log_probs)
        grad = probs.copy()
        np.put_along_axis(
            grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        grad *= (mask / n_valid)[..., None]
        return (grad * g,)

    out.bw = bw
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable requires_grad tensor."""
    if loss.value.shape != ():
        raise ValidationError(f"backward requires a scalar loss, got shape {loss.value.shape}")

    # Iterative post-order DFS; parent visit order is fixed by construction,
    # so accumulation order (and hence bit patterns) is deterministic.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node.bw is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.bw(node.grad)):
            if g is None or not p.requires_grad:
                continue
            # Gradients are never mutated in place, so aliasing a view is safe.
            p.grad = g if p.grad is None else p.grad + g
