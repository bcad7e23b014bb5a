"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

__all__ = ["numerical_grad", "max_relative_error", "check_gradients"]


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(
    f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``f`` must rebuild the scalar loss from ``tensors`` on every call.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for t in tensors:
        worst = max(worst, max_relative_error(t.grad, numerical_grad(f, t, h)))
    return worst
