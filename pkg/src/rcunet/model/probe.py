"""Empirical receptive field: which inputs does one output element depend on?"""
from __future__ import annotations

import warnings

import numpy as np

from ..tensor import Tape, Tensor, backward, no_grad
from .arch import ArchSpec
from .net import UNet


def gradient_footprint(
    spec_or_model,
    n_bands: int = 64,
    n_frames: int = 64,
    position: tuple[int, int] | None = None,
    channel: int = 0,
    trials: int = 3,
    seed: int = 0,
) -> tuple[int, int]:
    """(time, frequency) extent of the nonzero input gradient of one output element.

    Batch norm runs on running statistics so positions do not couple through
    batch means. Max pooling routes gradient to a single input per window, so
    the footprint is the union over ``trials`` random inputs.
    """
    model = UNet(spec_or_model, seed=seed) if isinstance(spec_or_model, ArchSpec) else spec_or_model
    rng = np.random.default_rng(seed)
    b, n = position if position is not None else (n_bands // 2, n_frames // 2)
    if not any(s.updates for s in model.bn.values()):
        # one statistics pass so eval-mode batch norm has something to use
        with no_grad():
            model(rng.normal(size=(2, n_bands, n_frames)), training=True)
    hit = np.zeros((n_bands, n_frames), dtype=bool)
    for _ in range(trials):
        Y = Tensor(rng.normal(size=(1, n_bands, n_frames)), requires_grad=True)
        with Tape(), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = model(Y, training=False)
            backward(out[0, b, n, channel])
        hit |= Y.grad[0] != 0
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    return int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)
