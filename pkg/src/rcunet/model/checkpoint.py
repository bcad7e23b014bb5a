"""Checkpoint files.

A checkpoint is an uncompressed ``.npz`` archive (no pickled objects) with

``format_version``   int, currently 1
``arch``             architecture description as JSON text
``meta``             JSON text: epoch, seed, target mode, free-form extras
``param/<name>``     parameter values, little-endian float64
``adam_m/<name>``, ``adam_v/<name>``, ``adam_t/<name>``   Adam moments and step counts
``bn_mean/<layer>``, ``bn_var/<layer>``, ``bn_n/<layer>``  batch-norm running statistics

Parameter names follow the registry, e.g. ``pb3.0.rc.bwr.fwd.w_x``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .net import Network, build_model, model_description

FORMAT_VERSION = 1


def save_checkpoint(path, model: Network, epoch: int = 0, seed: int = 0, **extra) -> Path:
    path = Path(path)
    arrays = {}
    for k, v in model.state_dict().items():
        v = np.asarray(v)
        arrays[k] = v.astype("<f8") if v.dtype.kind == "f" else v.astype("<i8")
    meta = {"epoch": int(epoch), "seed": int(seed), "target_mode": model.output_mode, **extra}
    arrays["format_version"] = np.array(FORMAT_VERSION, dtype="<i8")
    arrays["arch"] = np.array(json.dumps(model_description(model)))
    arrays["meta"] = np.array(json.dumps(meta))
    path.parent.mkdir(parents=True, exist_ok=True)
    # np.savez appends .npz to bare names; write through a handle to keep the given name
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path, dtype=np.float64) -> tuple[Network, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {version}")
        arch = json.loads(str(z["arch"]))
        meta = json.loads(str(z["meta"]))
        sd = {k: z[k] for k in z.files if "/" in k}
    model = build_model(arch, seed=int(meta.get("seed", 0)), dtype=dtype)
    model.load_state_dict(sd)
    return model, meta
