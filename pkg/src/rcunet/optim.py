"""Trainable parameters, gradient clipping and the Adam update."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor

__all__ = ["Parameter", "zero_grad", "clip_gradients", "adam_step"]


class Parameter(Tensor):
    """A named leaf tensor that carries its own Adam moments."""

    def __init__(self, data, name: str = "", recurrent: bool = False, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        # recurrence weights are the clipping targets by default
        self.recurrent = recurrent
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def clip_gradients(grads, threshold: float = 100.0):
    """Elementwise clamp of gradients to ``[-threshold, threshold]``.

    Accepts a single array, or an iterable of parameters whose ``.grad`` is
    clipped in place (the same parameters are returned).
    """
    if isinstance(grads, np.ndarray) or np.isscalar(grads):
        return np.clip(grads, -threshold, threshold)
    params = list(grads)
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, -threshold, threshold, out=p.grad)
    return params


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; parameters without a gradient are skipped."""
    for p in params:
        g = p.grad
        if g is None:
            continue
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        mhat = p.adam_m / (1.0 - beta1 ** p.step_count)
        vhat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
