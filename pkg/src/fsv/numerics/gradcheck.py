"""Finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def forward_backward(fn: Callable[..., Tensor], wrt: Sequence[Tensor]):
    """Evaluate the scalar ``fn(*wrt)`` and return ``(value, [grad per input])``.

    Inputs that the graph never reaches get a zero gradient.
    """
    for t in wrt:
        if not t.requires_grad:
            raise ValueError("every tensor in wrt must have requires_grad set")
        t.grad = None
    root = fn(*wrt)
    if root.size != 1:
        raise ValueError(f"forward_backward needs a scalar root, got shape {root.shape}")
    root.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    return float(root.data), grads


def numeric_grad(fn: Callable[..., Tensor], point: Sequence[np.ndarray], eps: float = 1e-5):
    """Central differences of scalar ``fn`` at ``point``, one array per input."""
    base = [np.array(p, dtype=np.float64) for p in point]
    out = []
    for i, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(fn(*[Tensor(b) for b in base]).data)
            flat[j] = orig - eps
            fm = float(fn(*[Tensor(b) for b in base]).data)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)."""
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    wrt = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in point]
    _, analytic = forward_backward(fn, wrt)
    numeric = numeric_grad(fn, point, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
