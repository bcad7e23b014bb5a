"""Runnable networks: BWR layers, RC pairs, U-nets and the FCLN / RNN baselines."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .. import functional as F
from ..optim import Parameter
from ..tensor import Tensor, as_tensor, concat
from .arch import RC, ArchSpec, Conv, MaxPool, TransposedConv

__all__ = [
    "Network",
    "UNet",
    "FCLN",
    "RNNBaseline",
    "bwr_forward",
    "rc_pair_forward",
    "unet_forward",
    "irm",
    "build_model",
]


class Network:
    """Parameter registry plus batch-norm statistics shared by all models."""

    output_mode = "mapping"

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.bn: "OrderedDict[str, F.BatchNormState]" = OrderedDict()

    # -- registry ----------------------------------------------------------
    def _add(self, name: str, data, recurrent: bool = False) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name=name, recurrent=recurrent, dtype=self.dtype)
        self.params[name] = p
        return p

    def uniform(self, name, shape, fan_in, recurrent=False) -> Parameter:
        bound = np.sqrt(3.0 / fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, shape), recurrent)

    def zeros(self, name, shape, recurrent=False) -> Parameter:
        return self._add(name, np.zeros(shape), recurrent)

    def ones(self, name, shape) -> Parameter:
        return self._add(name, np.ones(shape))

    def orthogonal_blocks(self, name, hidden, n_blocks) -> Parameter:
        blocks = []
        for _ in range(n_blocks):
            q, r = np.linalg.qr(self.rng.normal(size=(hidden, hidden)))
            blocks.append(q * np.sign(np.diag(r)))
        return self._add(name, np.concatenate(blocks, axis=1), recurrent=True)

    def batchnorm_params(self, name, k):
        self.bn[name] = F.BatchNormState(k)
        return self.ones(f"{name}.gamma", k), self.zeros(f"{name}.beta", k)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- state -------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {f"param/{k}": p.data for k, p in self.params.items()}
        for k, p in self.params.items():
            sd[f"adam_m/{k}"] = p.adam_m
            sd[f"adam_v/{k}"] = p.adam_v
            sd[f"adam_t/{k}"] = np.array(p.step_count)
        for k, s in self.bn.items():
            sd[f"bn_mean/{k}"] = s.ema_mean
            sd[f"bn_var/{k}"] = s.ema_var
            sd[f"bn_n/{k}"] = np.array(s.updates)
        return sd

    def load_state_dict(self, sd: dict) -> None:
        for k, p in self.params.items():
            arr = np.asarray(sd[f"param/{k}"])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype).copy()
            if f"adam_m/{k}" in sd:
                p.adam_m = np.asarray(sd[f"adam_m/{k}"]).astype(self.dtype).copy()
                p.adam_v = np.asarray(sd[f"adam_v/{k}"]).astype(self.dtype).copy()
                p.step_count = int(sd[f"adam_t/{k}"])
        for k, s in self.bn.items():
            s.ema_mean = np.asarray(sd[f"bn_mean/{k}"], dtype=np.float64).copy()
            s.ema_var = np.asarray(sd[f"bn_var/{k}"], dtype=np.float64).copy()
            s.updates = int(sd[f"bn_n/{k}"])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def __call__(self, Y, mask=None, training: bool = False) -> Tensor:
        return self.forward(Y, mask=mask, training=training)


# -- building blocks -----------------------------------------------------------

class GRUWeights:
    def __init__(self, net: Network, name: str, k_in: int, hidden: int):
        self.hidden = hidden
        self.w_x = net.uniform(f"{name}.w_x", (k_in, 3 * hidden), k_in, recurrent=True)
        self.w_h = net.orthogonal_blocks(f"{name}.w_h", hidden, 3)
        self.b = net.zeros(f"{name}.b", (3 * hidden,), recurrent=True)


class LSTMWeights:
    def __init__(self, net: Network, name: str, k_in: int, hidden: int):
        self.hidden = hidden
        self.w_x = net.uniform(f"{name}.w_x", (k_in, 4 * hidden), k_in, recurrent=True)
        self.w_h = net.orthogonal_blocks(f"{name}.w_h", hidden, 4)
        self.b = net.zeros(f"{name}.b", (4 * hidden,), recurrent=True)


def bwr_forward(I: Tensor, axis: str, fwd: GRUWeights, bwd: GRUWeights,
                mask: np.ndarray | None = None) -> Tensor:
    """Bidirectional weight-sharing recurrence over one spatial axis.

    ``I`` is ``[batch, B, N, K]``. For ``axis='T'`` every band is a sequence
    over frames; for ``axis='F'`` every frame is a sequence over bands. The
    same GRU weights serve all sequences. Output is ``[batch, B, N, 2H]``
    (forward states, then backward states). ``mask`` is ``[batch, N]``.
    """
    nb, B, N, K = I.shape
    H = fwd.hidden
    if axis == "T":
        seq = I.transpose(2, 0, 1, 3).reshape(N, nb * B, K)
        m = None if mask is None else np.repeat(np.asarray(mask).T, B, axis=1)
    elif axis == "F":
        seq = I.transpose(1, 0, 2, 3).reshape(B, nb * N, K)
        m = None
    else:
        raise ValueError(f"axis must be 'T' or 'F', got {axis!r}")
    hf = F.gru_seq(seq, fwd.w_x, fwd.w_h, fwd.b, mask=m)
    hb = F.gru_seq(seq, bwd.w_x, bwd.w_h, bwd.b, mask=m, reverse=True)
    R = concat([hf, hb], axis=-1)
    if axis == "T":
        return R.reshape(N, nb, B, 2 * H).transpose(1, 2, 0, 3)
    return R.reshape(B, nb, N, 2 * H).transpose(1, 0, 2, 3)


class ConvLayer:
    """3x3 'same' conv -> batch norm -> ELU."""

    def __init__(self, net: Network, name: str, k_in: int, k_out: int, size: int = 3):
        self.net, self.name = net, name
        self.kernel = net.uniform(f"{name}.kernel", (size, size, k_in, k_out), size * size * k_in)
        self.bias = net.zeros(f"{name}.bias", (k_out,))
        self.gamma, self.beta = net.batchnorm_params(f"{name}.bn", k_out)

    def __call__(self, x, mask, training):
        y = F.conv2d(x, self.kernel, self.bias)
        y = F.batchnorm(y, self.gamma, self.beta, self.net.bn[f"{self.name}.bn"], training,
                        mask=_bn_mask(mask))
        # padded frames go back to zero so they look like the conv's own zero padding
        return F.apply_mask(F.elu(y), _bn_mask(mask))


class RCPair:
    """I -> R = BN(BWR(I)) -> C = [I, R] -> O = ELU(BN(conv3x3(C)))."""

    def __init__(self, net: Network, name: str, k_in: int, atom: RC):
        self.net, self.name, self.axis = net, name, atom.axis
        h = atom.rec_units // 2
        self.fwd = GRUWeights(net, f"{name}.bwr.fwd", k_in, h)
        self.bwd = GRUWeights(net, f"{name}.bwr.bwd", k_in, h)
        self.r_gamma, self.r_beta = net.batchnorm_params(f"{name}.bwr.bn", atom.rec_units)
        self.conv = ConvLayer(net, f"{name}.conv", k_in + atom.rec_units, atom.k_out)

    def recurrent_features(self, I, mask, training):
        R = bwr_forward(I, self.axis, self.fwd, self.bwd, mask)
        R = F.batchnorm(R, self.r_gamma, self.r_beta, self.net.bn[f"{self.name}.bwr.bn"],
                        training, mask=_bn_mask(mask))
        return F.apply_mask(R, _bn_mask(mask))

    def __call__(self, I, mask, training):
        R = self.recurrent_features(I, mask, training)
        C = concat([I, R], axis=-1)
        return self.conv(C, mask, training)


class TConvLayer:
    def __init__(self, net: Network, name: str, k_in: int, atom: TransposedConv):
        self.atom = atom
        self.kernel = net.uniform(f"{name}.kernel", (atom.size, atom.size, k_in, atom.k_out),
                                  atom.size * atom.size * k_in // (atom.stride * atom.stride))
        self.bias = net.zeros(f"{name}.bias", (atom.k_out,))

    def __call__(self, x, mask, training):
        a = self.atom
        return F.conv_transpose2d(x, self.kernel, self.bias, stride=a.stride, crop=a.crop)


class PoolLayer:
    def __call__(self, x, mask, training):
        return F.maxpool2x2(x)


def _bn_mask(mask):
    # [batch, N] frame validity -> broadcastable over bands
    return None if mask is None else np.asarray(mask)[:, None, :]


def _pool_mask(mask):
    if mask is None:
        return None
    n = mask.shape[1]
    m = np.pad(mask, ((0, 0), (0, n % 2)))
    return m.reshape(mask.shape[0], -1, 2).max(axis=2)


def _upsample_mask(mask):
    return None if mask is None else np.repeat(mask, 2, axis=1)


def _mask_all_valid(mask) -> bool:
    return mask is None or bool(np.all(mask))


def _as_batch(Y) -> tuple[Tensor, bool]:
    Y = as_tensor(Y)
    if Y.ndim == 2:
        return Y.reshape((1,) + Y.shape), True
    if Y.ndim != 3:
        raise ValueError(f"expected spectrogram [B,N] or [batch,B,N], got {Y.shape}")
    return Y, False


class UNet(Network):
    """U-net of processing blocks with skip concatenations, built from an :class:`ArchSpec`."""

    def __init__(self, spec: ArchSpec, seed: int = 0, dtype=np.float64):
        super().__init__(seed, dtype)
        self.spec = spec
        self.output_mode = spec.output_mode
        self.blocks = []
        for i, (b, (k_in, _)) in enumerate(zip(spec.blocks, spec.feature_counts())):
            layers = []
            k = k_in
            for j, a in enumerate(b.layers):
                name = f"pb{i + 1}.{j}"
                if isinstance(a, Conv):
                    layers.append(ConvLayer(self, name + ".conv", k, a.k_out, a.size))
                    k = a.k_out
                elif isinstance(a, RC):
                    layers.append(RCPair(self, name + ".rc", k, a))
                    k = a.k_out
                elif isinstance(a, MaxPool):
                    layers.append(PoolLayer())
                elif isinstance(a, TransposedConv):
                    layers.append(TConvLayer(self, name + ".tconv", k, a))
                    k = a.k_out
            self.blocks.append(layers)
        k_last = spec.feature_counts()[-1][1]
        self.head_w = self.uniform("head.kernel", (1, 1, k_last, spec.out_channels), k_last)
        self.head_b = self.zeros("head.bias", (spec.out_channels,))

    def forward(self, Y, mask=None, training: bool = False) -> Tensor:
        """``Y`` ``[batch, B, N]`` (or ``[B, N]``) -> ``[batch, B, N, C]`` (C = 2 or 1)."""
        Y, squeeze = _as_batch(Y)
        if Y.dtype != self.dtype:
            Y = Tensor(Y.data.astype(self.dtype), requires_grad=Y.requires_grad)
        nb, B, N = Y.shape
        if mask is not None:
            mask = np.asarray(mask, dtype=self.dtype)
            if mask.shape != (nb, N):
                raise ValueError(f"mask must be [batch, N] = {(nb, N)}, got {mask.shape}")
        x = Y.reshape(nb, B, N, 1)

        f = self.spec.pool_factor
        padB, padN = (-B) % f, (-N) % f
        if padB or padN:
            x = x.pad(((0, 0), (0, padB), (0, padN), (0, 0)), mode="reflect")
            if mask is not None:
                mask = np.pad(mask, ((0, 0), (0, padN)), mode="reflect")
        if _mask_all_valid(mask):
            mask = None
        else:
            x = F.apply_mask(x, mask[:, None, :])

        outs = []
        for layers, srcs in zip(self.blocks, self.spec.block_inputs()):
            if not srcs:
                h, m = x, mask
            else:
                h = outs[srcs[0]][0] if len(srcs) == 1 else concat([outs[i][0] for i in srcs], -1)
                m = outs[srcs[0]][1]
            for layer in layers:
                if isinstance(layer, PoolLayer):
                    h, m = layer(h, m, training), _pool_mask(m)
                elif isinstance(layer, TConvLayer):
                    h, m = layer(h, m, training), _upsample_mask(m)
                else:
                    h = layer(h, m, training)
            if m is not None:
                h = F.apply_mask(h, m[:, None, :])
            outs.append((h, m))
        out = F.conv2d(outs[-1][0], self.head_w, self.head_b)
        if padB or padN:
            out = out[:, :B, :N, :]
        return out.reshape(out.shape[1:]) if squeeze else out


def unet_forward(model: UNet, Y, mask=None, training: bool = False):
    """``(S_hat, N_hat)`` in mapping mode, the mask in IRM mode; each ``[.., B, N]``."""
    out = model.forward(Y, mask=mask, training=training)
    if model.output_mode == "mapping":
        return out[..., 0], out[..., 1]
    return out[..., 0]


def rc_pair_forward(net: Network, I: Tensor, atom: RC, name: str = "rc", training=True) -> Tensor:
    """Build (once, under ``name``) and apply an RC pair to ``I`` ``[batch, B, N, K]``."""
    layer = getattr(net, "_rc_cache", {}).get(name)
    if layer is None:
        layer = RCPair(net, name, I.shape[-1], atom)
        net.__dict__.setdefault("_rc_cache", {})[name] = layer
    return layer(I, None, training)


def irm(S_mag, N_mag) -> np.ndarray:
    """Ideal ratio mask sqrt(S^2 / (S^2 + N^2)) on linear magnitudes; 0/0 -> 0."""
    S2 = np.asarray(S_mag, dtype=np.float64) ** 2
    N2 = np.asarray(N_mag, dtype=np.float64) ** 2
    den = S2 + N2
    out = np.zeros_like(den)
    np.divide(S2, den, out=out, where=den > 0)
    return np.sqrt(out)


# -- baselines ---------------------------------------------------------------

def sliding_windows(Y: np.ndarray, context: int = 11) -> np.ndarray:
    """``[batch, B, N]`` -> ``[batch, N, 2*context+1, B]`` with edge-frame replication."""
    Y = np.asarray(Y)
    nb, B, N = Y.shape
    padded = np.pad(Y, ((0, 0), (0, 0), (context, context)), mode="edge")
    idx = np.arange(N)[:, None] + np.arange(2 * context + 1)[None, :]
    return padded[:, :, idx].transpose(0, 2, 3, 1)


class FCLN(Network):
    """Fully connected IRM estimator over a 23-frame sliding window."""

    output_mode = "irm"

    def __init__(self, n_bands: int = 64, context: int = 11, hidden=(512, 512, 512, 512),
                 seed: int = 0, dtype=np.float64):
        super().__init__(seed, dtype)
        self.n_bands, self.context, self.hidden = n_bands, context, tuple(hidden)
        dims = [n_bands * (2 * context + 1), *hidden, n_bands]
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = self.uniform(f"fc{i}.weight", (a, b), a)
            bias = self.zeros(f"fc{i}.bias", (b,))
            self.layers.append((w, bias))

    def frame_forward(self, windows) -> Tensor:
        """``[..., 23*64]`` flattened windows -> ``[..., 64]`` mask frames."""
        h = as_tensor(windows, self.dtype)
        for i, (w, b) in enumerate(self.layers):
            h = F.linear(h, w, b)
            if i < len(self.layers) - 1:
                h = F.elu(h)
        return h

    def forward(self, Y, mask=None, training: bool = False) -> Tensor:
        Y, squeeze = _as_batch(Y)
        nb, B, N = Y.shape
        win = sliding_windows(Y.data, self.context).reshape(nb, N, -1).astype(self.dtype)
        out = self.frame_forward(Tensor(win)).transpose(0, 2, 1).reshape(nb, B, N, 1)
        return out.reshape(out.shape[1:]) if squeeze else out


class RNNBaseline(Network):
    """Stacked bidirectional LSTMs over a 23-frame window; centre frame -> linear IRM."""

    output_mode = "irm"

    def __init__(self, n_bands: int = 64, context: int = 11, hidden: int = 512, layers: int = 4,
                 seed: int = 0, dtype=np.float64):
        super().__init__(seed, dtype)
        self.n_bands, self.context, self.hidden, self.n_layers = n_bands, context, hidden, layers
        self.cells = []
        k = n_bands
        for i in range(layers):
            self.cells.append((
                LSTMWeights(self, f"lstm{i}.fwd", k, hidden),
                LSTMWeights(self, f"lstm{i}.bwd", k, hidden),
            ))
            k = 2 * hidden
        self.out_w = self.uniform("out.weight", (k, n_bands), k)
        self.out_b = self.zeros("out.bias", (n_bands,))

    def window_forward(self, windows) -> Tensor:
        """``[batch, 23, 64]`` windows -> ``[batch, 64]`` mask frames."""
        h = as_tensor(windows).transpose(1, 0, 2)  # [T, batch, 64]
        for fwd, bwd in self.cells:
            hf = F.lstm_seq(h, fwd.w_x, fwd.w_h, fwd.b)
            hb = F.lstm_seq(h, bwd.w_x, bwd.w_h, bwd.b, reverse=True)
            h = concat([hf, hb], axis=-1)
        centre = h[self.context]
        return F.linear(centre, self.out_w, self.out_b)

    def forward(self, Y, mask=None, training: bool = False) -> Tensor:
        Y, squeeze = _as_batch(Y)
        nb, B, N = Y.shape
        win = sliding_windows(Y.data, self.context).reshape(nb * N, 2 * self.context + 1, B)
        out = self.window_forward(Tensor(win.astype(self.dtype)))
        out = out.reshape(nb, N, B).transpose(0, 2, 1).reshape(nb, B, N, 1)
        return out.reshape(out.shape[1:]) if squeeze else out


def fcln_forward(model: FCLN, Y_window) -> Tensor:
    return model.frame_forward(Y_window)


def rnn_forward(model: RNNBaseline, Y_window) -> Tensor:
    return model.window_forward(Y_window)


BASELINE_NAMES = ("FCLN", "RNN")


def build_model(arch, seed: int = 0, dtype=np.float64, output_mode: str | None = None) -> Network:
    """Model from an :class:`ArchSpec`, a canonical name, or a serialized description."""
    from .arch import canonical_archs

    if isinstance(arch, ArchSpec):
        spec = arch if output_mode is None else arch.with_mode(output_mode)
        return UNet(spec, seed, dtype)
    if isinstance(arch, dict):
        fam = arch.get("family", "unet")
        if fam == "unet":
            return UNet(ArchSpec.from_dict(arch), seed, dtype)
        if fam == "fcln":
            return FCLN(arch["n_bands"], arch["context"], arch["hidden"], seed, dtype)
        if fam == "rnn":
            return RNNBaseline(arch["n_bands"], arch["context"], arch["hidden"], arch["layers"],
                               seed, dtype)
        raise ValueError(f"unknown model family {fam!r}")
    name = str(arch)
    if name == "FCLN":
        return FCLN(seed=seed, dtype=dtype)
    if name == "RNN":
        return RNNBaseline(seed=seed, dtype=dtype)
    archs = canonical_archs(output_mode or "mapping")
    if name not in archs:
        raise KeyError(name)
    return UNet(archs[name], seed, dtype)


def model_description(model: Network) -> dict:
    if isinstance(model, UNet):
        return model.spec.to_dict()
    if isinstance(model, FCLN):
        return {"family": "fcln", "n_bands": model.n_bands, "context": model.context,
                "hidden": list(model.hidden)}
    if isinstance(model, RNNBaseline):
        return {"family": "rnn", "n_bands": model.n_bands, "context": model.context,
                "hidden": model.hidden, "layers": model.n_layers}
    raise TypeError(type(model))
