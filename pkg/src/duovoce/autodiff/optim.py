from __future__ import annotations

import numpy as np


def sgd_step(params, lr: float):
    """In-place ``p <- p - lr * grad``, then zero the gradients."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p!r} has no gradient; run backward first")
    for p in params:
        p.data -= np.asarray(lr * p.grad, dtype=p.data.dtype)
        p.grad = np.zeros_like(p.data)


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def average_grads(grad_sets):
    """Order-fixed mean of per-worker gradient dicts (name -> array)."""
    names = sorted(grad_sets[0])
    out = {}
    for name in names:
        acc = np.zeros_like(grad_sets[0][name], dtype=np.float64)
        for gs in grad_sets:
            acc += gs[name]
        out[name] = (acc / len(grad_sets)).astype(grad_sets[0][name].dtype)
    return out
