"""Minimal tape-based reverse-mode automatic differentiation.

Every differentiable operation that runs while at least one of its inputs
requires a gradient appends a :class:`Node` to the active :class:`Tape`.
:func:`backward` replays the tape in exact reverse order of execution.

Example
-------
>>> x = Tensor(np.arange(3.0), requires_grad=True)
>>> loss = (x * x).sum()
>>> backward(loss)
>>> x.grad
array([0., 2., 4.])
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "as_tensor",
    "concat",
    "l1_loss",
    "sigmoid",
    "tanh",
    "exp",
]


@dataclass(eq=False)
class Node:
    """One recorded op: its output, inputs, and the adjoint rule."""

    out: "Tensor"
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence]
    name: str = ""


@dataclass(eq=False)
class Tape:
    """Ordered record of executed ops.

    Usable as a context manager; while entered, it is the tape new ops are
    recorded on. A tape can be replayed by :func:`backward` exactly once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a tape that was already replayed")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)


_TAPE_STACK: list[Tape] = []
_DEFAULT_TAPE = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    if _TAPE_STACK:
        return _TAPE_STACK[-1]
    return _DEFAULT_TAPE[0]


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return constants."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    """Dense float array with optional participation in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out = self.data + other.data

        def bw(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return _record(out, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return _record(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return _record(a / b, (self, other), bw, "div")

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")

        def bw(g):
            return g @ b.T, a.T @ g

        return _record(a @ b, (self, other), bw, "matmul")

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def abs(self):
        a = self.data
        # subgradient 0 at exact ties
        return _record(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _record(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (np.ascontiguousarray(g.transpose(inv)),),
            "transpose",
        )

    def flip(self, axis: int):
        return _record(
            np.ascontiguousarray(np.flip(self.data, axis)),
            (self,),
            lambda g: (np.ascontiguousarray(np.flip(g, axis)),),
            "flip",
        )

    def __getitem__(self, idx):
        shape = self.shape

        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return _record(np.array(self.data[idx]), (self,), bw, "getitem")

    def pad(self, pad_width, mode: str = "constant"):
        """Zero or reflection padding; ``pad_width`` as for ``np.pad``."""
        pad_width = [tuple(p) for p in pad_width]
        slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, self.shape))
        if mode == "constant":
            out = np.pad(self.data, pad_width)

            def bw(g):
                return (g[slices],)

        elif mode == "reflect":
            out = np.pad(self.data, pad_width, mode="reflect")
            idx = np.pad(np.arange(self.size).reshape(self.shape), pad_width, mode="reflect")
            size, shape = self.size, self.shape

            def bw(g):
                flat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=size)
                return (flat.reshape(shape).astype(g.dtype),)

        else:
            raise ValueError(f"unsupported pad mode {mode!r}")
        return _record(out, (self,), bw, "pad")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _record(out: np.ndarray, inputs: tuple, backward_fn, name: str = "") -> Tensor:
    """Wrap ``out`` in a Tensor and record it if any input needs a gradient."""
    needs = _GRAD_ENABLED[0] and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape = current_tape()
        tape.record(Node(result, inputs, backward_fn, name))
        result._tape = tape
    return result


record = _record


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Tensors on the tape that the loss does not depend on get zero gradients.
    A tape can be replayed only once; run the forward pass again first.
    """
    if not loss.requires_grad or loss._tape is None:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = loss._tape
    if tape.consumed:
        raise RuntimeError("backward already called for this graph; re-run the forward pass")
    if grad is None:
        if loss.size != 1:
            raise ValueError("grad must be given for non-scalar outputs")
        grad = np.ones_like(loss.data)
    loss.grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)

    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=t.dtype, copy=True).reshape(t.shape)
            else:
                t.grad = t.grad + gi
    for node in tape.nodes:
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)

    tape.consumed = True
    tape.nodes = []
    if tape is _DEFAULT_TAPE[0]:
        _DEFAULT_TAPE[0] = Tape()


# -- free functions -------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    out = np.tanh(0.5 * a)
    out += 1.0
    out *= 0.5
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: shape mismatch {t.shape} vs {ref} outside axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(
            g[(slice(None),) * ax + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record(out, tuple(tensors), bw, "concat")


def l1_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error; with ``mask`` the mean runs over weighted elements only."""
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        w = None
        denom = diff.size
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=diff.dtype), diff.shape)
        denom = float(w.sum())
        if denom <= 0:
            raise ValueError("l1_loss: mask selects no elements")
    absd = np.abs(diff) if w is None else np.abs(diff) * w
    value = np.asarray(absd.sum() / denom, dtype=diff.dtype)
    sgn = np.sign(diff) if w is None else np.sign(diff) * w

    def bw(g):
        d = g * sgn / denom
        return d, -d

    return _record(value, (pred, target), bw, "l1_loss")
