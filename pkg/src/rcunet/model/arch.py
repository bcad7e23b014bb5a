"""Declarative U-net descriptions and the closed-form analyzer.

An :class:`ArchSpec` lists ``L`` processing blocks (``L/2`` encoder, ``L/2``
decoder). Block ``l`` of the decoder, for ``l >= L/2 + 2``, concatenates the
previous block's output with that of encoder block ``L + 1 - l``.
Parameter counts and receptive fields are derived from the spec alone, so
they can be audited against a built model.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Union

FULL = math.inf


@dataclass(frozen=True)
class Conv:
    k_out: int
    size: int = 3


@dataclass(frozen=True)
class RC:
    """Recurrent-convolutional pair: BWR with ``rec_units`` (both directions) then a 3x3 conv."""

    rec_units: int
    axis: str
    k_out: int


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class TransposedConv:
    k_out: int
    size: int = 6
    stride: int = 2
    crop: int = 2


Layer = Union[Conv, RC, MaxPool, TransposedConv]
_KINDS = {"conv": Conv, "rc": RC, "maxpool": MaxPool, "tconv": TransposedConv}
_NAMES = {v: k for k, v in _KINDS.items()}


@dataclass(frozen=True)
class BlockSpec:
    layers: tuple
    level: int
    side: str  # "encoder" | "decoder"

    def __post_init__(self):
        if self.side not in ("encoder", "decoder"):
            raise ValueError(f"block side must be encoder or decoder, got {self.side!r}")
        for a in self.layers:
            if isinstance(a, MaxPool) and self.side != "encoder":
                raise ValueError("MaxPool is only allowed in encoder blocks")
            if isinstance(a, TransposedConv) and self.side != "decoder":
                raise ValueError("TransposedConv is only allowed in decoder blocks")
            if isinstance(a, RC):
                if a.rec_units % 2:
                    raise ValueError("RC rec_units must be even (split over two directions)")
                if a.axis not in ("T", "F"):
                    raise ValueError(f"RC axis must be 'T' or 'F', got {a.axis!r}")

    def k_out(self, k_in: int) -> int:
        k = k_in
        for a in self.layers:
            if not isinstance(a, MaxPool):
                k = a.k_out
        return k


@dataclass(frozen=True)
class ArchSpec:
    name: str
    blocks: tuple
    output_mode: str = "mapping"  # "mapping" | "irm"
    in_features: int = 1

    def __post_init__(self):
        if self.output_mode not in ("mapping", "irm"):
            raise ValueError(f"output_mode must be 'mapping' or 'irm', got {self.output_mode!r}")
        L = len(self.blocks)
        if L < 2 or L % 2:
            raise ValueError(f"a U-net needs an even number of blocks, got {L}")
        for i, b in enumerate(self.blocks):
            expected = "encoder" if i < L // 2 else "decoder"
            if b.side != expected:
                raise ValueError(f"block {i + 1} should be a {expected} block")
        # resolution bookkeeping: skip partners must meet at the same scale
        scales = self.block_scales()
        for l in range(L // 2 + 2, L + 1):
            s_prev, s_skip = scales[l - 2][1], scales[L - l][1]
            if s_prev != s_skip:
                raise ValueError(
                    f"block {l}: input from block {l - 1} is at scale 1/{s_prev} but the "
                    f"skip from block {L + 1 - l} is at 1/{s_skip}"
                )
        if scales[-1][1] != 1:
            raise ValueError("the network must return to full resolution")

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def out_channels(self) -> int:
        return 2 if self.output_mode == "mapping" else 1

    @property
    def pool_factor(self) -> int:
        return 2 ** sum(isinstance(a, MaxPool) for b in self.blocks for a in b.layers)

    def with_mode(self, output_mode: str) -> "ArchSpec":
        return ArchSpec(self.name, self.blocks, output_mode, self.in_features)

    def block_scales(self) -> list[tuple[int, int]]:
        """(input scale, output scale) per block, as downsampling factors."""
        out, s = [], 1
        for b in self.blocks:
            s_in = s
            for a in b.layers:
                if isinstance(a, MaxPool):
                    s *= 2
                elif isinstance(a, TransposedConv):
                    if s % a.stride:
                        raise ValueError("transposed convolution would upsample past full resolution")
                    s //= a.stride
            out.append((s_in, s))
        return out

    def block_inputs(self) -> list[tuple[int, ...]]:
        """Indices (0-based) of the blocks whose outputs feed each block; () means Y."""
        L = self.L
        srcs = []
        for l in range(1, L + 1):
            if l == 1:
                srcs.append(())
            elif l <= L // 2 + 1:
                srcs.append((l - 2,))
            else:
                srcs.append((l - 2, L - l))
        return srcs

    def feature_counts(self) -> list[tuple[int, int]]:
        """(K_in, K_out) of every block."""
        counts: list[tuple[int, int]] = []
        for b, srcs in zip(self.blocks, self.block_inputs()):
            k_in = self.in_features if not srcs else sum(counts[i][1] for i in srcs)
            counts.append((k_in, b.k_out(k_in)))
        return counts

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "family": "unet",
            "name": self.name,
            "output_mode": self.output_mode,
            "in_features": self.in_features,
            "blocks": [
                {
                    "level": b.level,
                    "side": b.side,
                    "layers": [{"kind": _NAMES[type(a)], **asdict(a)} for a in b.layers],
                }
                for b in self.blocks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        blocks = []
        for b in d["blocks"]:
            layers = []
            for a in b["layers"]:
                a = dict(a)
                layers.append(_KINDS[a.pop("kind")](**a))
            blocks.append(BlockSpec(tuple(layers), b["level"], b["side"]))
        return cls(d["name"], tuple(blocks), d.get("output_mode", "mapping"), d.get("in_features", 1))

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))


# -- canonical architectures ---------------------------------------------------

def _level(i: int, L: int) -> int:
    return i + 1 if i < L // 2 else L - i


def _side(i: int, L: int) -> str:
    return "encoder" if i < L // 2 else "decoder"


def _uniform(name: str, make_layers, levels: int = 5, output_mode: str = "mapping") -> ArchSpec:
    L = 2 * levels
    blocks = tuple(
        BlockSpec(tuple(make_layers(i + 1, L)), _level(i, L), _side(i, L)) for i in range(L)
    )
    return ArchSpec(name, blocks, output_mode)


def all_rc(levels: int = 5, features: int = 48, rec_units: int = 16, first_axis: str = "F",
           output_mode: str = "mapping", name: str = "ALL_RC") -> ArchSpec:
    """RC pair in every block, axes alternating from ``first_axis``."""
    other = {"F": "T", "T": "F"}[first_axis]
    return _uniform(
        name,
        lambda l, L: [RC(rec_units, first_axis if l % 2 else other, features)],
        levels,
        output_mode,
    )


def odd_rc(levels: int = 5, features: int = 48, rec_units: int = 16, first_axis: str = "F",
           output_mode: str = "mapping", name: str = "ODD_RC") -> ArchSpec:
    """RC pairs in odd blocks (axes alternating among them), plain convs in even blocks."""
    other = {"F": "T", "T": "F"}[first_axis]

    def layers(l, L):
        if l % 2 == 0:
            return [Conv(features)]
        return [RC(rec_units, first_axis if (l // 2) % 2 == 0 else other, features)]

    return _uniform(name, layers, levels, output_mode)


def plain_conv(features: int, per_block: int = 1, levels: int = 5, name: str | None = None,
               output_mode: str = "mapping") -> ArchSpec:
    name = name or "_".join([f"C{features}"] * per_block)
    return _uniform(name, lambda l, L: [Conv(features)] * per_block, levels, output_mode)


def conv_mp(features: int = 64, levels: int = 5, name: str = "C64_MP",
            output_mode: str = "mapping") -> ArchSpec:
    """Conv per block, max-pool after the conv in encoder blocks 1..L/2-1,
    transposed conv before the conv in decoder blocks L/2+2..L."""

    def layers(l, L):
        if l < L // 2:
            return [Conv(features), MaxPool()]
        if l > L // 2 + 1:
            return [TransposedConv(features), Conv(features)]
        return [Conv(features)]

    return _uniform(name, layers, levels, output_mode)


CANONICAL_NAMES = ("C48", "C64", "C48_C48", "C64_MP", "ALL_RC", "ODD_RC")


def canonical_archs(output_mode: str = "mapping", first_axis: str = "F") -> dict[str, ArchSpec]:
    """The six evaluated U-nets: four convolutional baselines and two with RC pairs."""
    return {
        "C48": plain_conv(48, output_mode=output_mode),
        "C64": plain_conv(64, output_mode=output_mode),
        "C48_C48": plain_conv(48, per_block=2, output_mode=output_mode),
        "C64_MP": conv_mp(64, output_mode=output_mode),
        "ALL_RC": all_rc(first_axis=first_axis, output_mode=output_mode),
        "ODD_RC": odd_rc(first_axis=first_axis, output_mode=output_mode),
    }


def uses_recurrence(spec: ArchSpec) -> bool:
    return any(isinstance(a, RC) for b in spec.blocks for a in b.layers)


# -- parameter count --------------------------------------------------------

def conv_params(k: int, k_in: int, k_out: int) -> int:
    return k * k * k_in * k_out + k_out


def gru_params(k_in: int, hidden: int) -> int:
    return 3 * (k_in * hidden + hidden * hidden + hidden)


def layer_params(a, k_in: int) -> tuple[int, int]:
    """(trainable scalars, K_out) of one layer atom."""
    if isinstance(a, Conv):
        return conv_params(a.size, k_in, a.k_out) + 2 * a.k_out, a.k_out
    if isinstance(a, RC):
        h = a.rec_units // 2
        n = 2 * gru_params(k_in, h) + 2 * a.rec_units
        n += conv_params(3, k_in + a.rec_units, a.k_out) + 2 * a.k_out
        return n, a.k_out
    if isinstance(a, TransposedConv):
        return conv_params(a.size, k_in, a.k_out), a.k_out
    return 0, k_in


def count_params(spec: ArchSpec) -> int:
    """Trainable scalars from the closed-form per-layer formulas."""
    total = 0
    for b, (k_in, _) in zip(spec.blocks, spec.feature_counts()):
        k = k_in
        for a in b.layers:
            n, k = layer_params(a, k)
            total += n
    k_last = spec.feature_counts()[-1][1]
    return total + conv_params(1, k_last, spec.out_channels)


# -- receptive field --------------------------------------------------------

@dataclass(frozen=True)
class ReceptiveField:
    """Extent (frames x bands) of the input region one output element depends on."""

    time: float
    freq: float

    @staticmethod
    def _fmt(v) -> str:
        return "full" if v == FULL else str(int(v))

    def __str__(self) -> str:
        return f"({self._fmt(self.time)}, {self._fmt(self.freq)})"

    def as_tuple(self) -> tuple:
        return (self._fmt(self.time), self._fmt(self.freq))

    def clipped(self, n_frames: int, n_bands: int) -> tuple[int, int]:
        """Extent visible on a finite ``n_bands x n_frames`` input."""
        return int(min(self.time, n_frames)), int(min(self.freq, n_bands))


@dataclass
class _Extent:
    t: float = 1
    f: float = 1
    jump: int = 1

    def copy(self) -> "_Extent":
        return _Extent(self.t, self.f, self.jump)


def _propagate(e: _Extent, a) -> _Extent:
    e = e.copy()
    if isinstance(a, Conv):
        e.t += (a.size - 1) * e.jump
        e.f += (a.size - 1) * e.jump
    elif isinstance(a, RC):
        if a.axis == "T":
            e.t = FULL
        else:
            e.f = FULL
        e.t += 2 * e.jump
        e.f += 2 * e.jump
    elif isinstance(a, MaxPool):
        e.t += e.jump
        e.f += e.jump
        e.jump *= 2
    elif isinstance(a, TransposedConv):
        taps = -(-a.size // a.stride)
        e.jump //= a.stride
        e.t += (taps - 1) * e.jump * a.stride
        e.f += (taps - 1) * e.jump * a.stride
    return e


def receptive_field(spec: ArchSpec) -> ReceptiveField:
    """Symbolic receptive field, union over all input-output paths (skips included).

    3x3 convs add 2 units of the current scale, pooling adds one and doubles
    the scale, transposed convs add their coarse-grid taps and halve it, and
    a BWR makes its axis fully covered.
    """
    outs: list[_Extent] = []
    for b, srcs in zip(spec.blocks, spec.block_inputs()):
        if not srcs:
            e = _Extent()
        else:
            parts = [outs[i] for i in srcs]
            e = _Extent(max(p.t for p in parts), max(p.f for p in parts), parts[0].jump)
        for a in b.layers:
            e = _propagate(e, a)
        outs.append(e)
    last = outs[-1]
    return ReceptiveField(last.t, last.f)


def rc_axis_paths(spec: ArchSpec) -> list[list[str]]:
    """RC axis sequence along every input-to-output path through the block graph."""
    consumers: dict[int, list[int]] = {i: [] for i in range(spec.L)}
    for j, srcs in enumerate(spec.block_inputs()):
        for i in srcs:
            consumers[i].append(j)

    def axes(i):
        return [a.axis for a in spec.blocks[i].layers if isinstance(a, RC)]

    paths = []

    def walk(i, acc):
        acc = acc + axes(i)
        if i == spec.L - 1:
            paths.append(acc)
            return
        for j in consumers[i]:
            walk(j, acc)

    walk(0, [])
    return paths


def describe(spec: ArchSpec) -> str:
    """Human-readable block table (encoder left, decoder right)."""
    def cell(b):
        parts = []
        for a in b.layers:
            if isinstance(a, Conv):
                parts.append(f"C{a.k_out}" if a.size == 3 else f"C{a.k_out}[{a.size}x{a.size}]")
            elif isinstance(a, RC):
                parts.append(f"R{a.axis}{a.rec_units}_C{a.k_out}")
            elif isinstance(a, MaxPool):
                parts.append("MP")
            else:
                parts.append(f"TC{a.k_out}")
        return " ".join(parts)

    L = spec.L
    lines = [f"{'level':>5}  {'encoder':<18} {'decoder':<18}"]
    for lv in range(1, L // 2 + 1):
        enc = spec.blocks[lv - 1]
        dec = spec.blocks[L - lv]
        lines.append(f"{lv:>5}  PB{lv:<2} {cell(enc):<14} PB{L + 1 - lv:<2} {cell(dec):<14}")
    head = "1x1 linear, 2 outputs" if spec.output_mode == "mapping" else "1x1 linear, 1 output"
    lines.append(f"{'':>5}  head: {head}")
    return "\n".join(lines)
