"""Central-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def _scalar(out) -> float:
    if isinstance(out, Tensor):
        return out.item()
    return float(out)


def grad_check(f, x, eps: float = 1e-3, *, n_coords: int | None = None, seed: int = 0, dtype=np.float64) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is a Tensor or a list of Tensors passed positionally to ``f``. The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Inputs are promoted to ``dtype`` for the duration of the check (float64
    by default so the oracle's own rounding stays far below the tolerance);
    ``n_coords`` limits the check to a random subset of coordinates per input.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.data, t.requires_grad, t.grad) for t in xs]
    rng = np.random.default_rng(seed)
    try:
        for t in xs:
            t.data = t.data.astype(dtype, copy=True)
            t.requires_grad = True
            t.grad = None
        out = f(*xs)
        if isinstance(out, Tensor) and out.requires_grad:
            out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

        worst = 0.0
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if n_coords is not None and flat.size > n_coords:
                coords = rng.choice(flat.size, size=n_coords, replace=False)
            a_flat = a.reshape(-1)
            for c in coords:
                orig = flat[c]
                with no_grad():
                    flat[c] = orig + eps
                    fp = _scalar(f(*xs))
                    flat[c] = orig - eps
                    fm = _scalar(f(*xs))
                flat[c] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(a_flat[c])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, (data, rg, grad) in zip(xs, saved):
            t.data, t.requires_grad, t.grad = data, rg, grad
