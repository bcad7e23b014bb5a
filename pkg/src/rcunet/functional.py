"""Differentiable layer kernels: convolutions, pooling, ELU, batch norm, GRU, LSTM.

Feature maps are channel-last: ``[batch, B, N, K]`` (bands, frames, features).
Every op here also accepts an unbatched ``[B, N, K]`` map and returns the
same rank it was given.

Each op computes its forward pass in numpy and registers a hand-written
adjoint on the tape.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _sigmoid, as_tensor, record

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "maxpool2x2",
    "elu",
    "linear",
    "BatchNormState",
    "batchnorm",
    "gru_seq",
    "lstm_seq",
    "apply_mask",
]


def _as4d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected a [batch,B,N,K] or [B,N,K] feature map, got shape {x.shape}")
    return x, False


def _maybe_squeeze(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """'Same' zero-padded 2-D convolution (cross-correlation) with odd kernel size.

    Parameters
    ----------
    x : Tensor
        ``[batch, B, N, K_in]`` or ``[B, N, K_in]``.
    kernel : Tensor
        ``[k, k, K_in, K_out]`` with ``k`` odd.
    bias : Tensor, optional
        ``[K_out]``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x.dtype)
    x4, squeeze = _as4d(x)
    k = kernel.shape[0]
    if kernel.ndim != 4 or kernel.shape[1] != k or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be [k,k,K_in,K_out] with odd k, got {kernel.shape}")
    nb, B, N, kin = x4.shape
    if kernel.shape[2] != kin:
        raise ValueError(
            f"conv2d: kernel expects K_in={kernel.shape[2]} input features but the map has {kin}"
        )
    kout = kernel.shape[3]
    p = k // 2
    xp = np.pad(x4.data, ((0, 0), (p, p), (p, p), (0, 0)))
    W = kernel.data
    out = np.zeros((nb * B * N, kout), dtype=x4.dtype)
    for dy in range(k):
        for dx in range(k):
            cols = xp[:, dy:dy + B, dx:dx + N, :].reshape(-1, kin)
            out += cols @ W[dy, dx]
    if bias is not None:
        out += bias.data
    out = out.reshape(nb, B, N, kout)
    del xp  # re-padded in backward; keeping it would double the tape's conv memory

    def bw(g):
        xp = np.pad(x4.data, ((0, 0), (p, p), (p, p), (0, 0)))
        gf = g.reshape(-1, kout)
        dW = np.empty_like(W)
        dxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                cols = xp[:, dy:dy + B, dx:dx + N, :].reshape(-1, kin)
                dW[dy, dx] = cols.T @ gf
                dxp[:, dy:dy + B, dx:dx + N, :] += (gf @ W[dy, dx].T).reshape(nb, B, N, kin)
        dx_ = dxp[:, p:p + B, p:p + N, :]
        db = gf.sum(axis=0) if bias is not None else None
        return dx_, dW, db

    inputs = (x4, kernel) + ((bias,) if bias is not None else ())
    y = record(out, inputs, bw, "conv2d")
    return _maybe_squeeze(y, squeeze)


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2, crop: int = 2
) -> Tensor:
    """Transposed convolution: zero-stuff by ``stride``, full correlation, crop.

    With the default 6x6 kernel, stride 2 and crop 2 the spatial extents
    exactly double.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x.dtype)
    x4, squeeze = _as4d(x)
    k = kernel.shape[0]
    nb, B, N, kin = x4.shape
    if kernel.ndim != 4 or kernel.shape[1] != k or kernel.shape[2] != kin:
        raise ValueError(
            f"conv_transpose2d: kernel {kernel.shape} incompatible with {kin} input features"
        )
    kout = kernel.shape[3]
    FB, FN = (B - 1) * stride + k, (N - 1) * stride + k
    OB, ON = FB - 2 * crop, FN - 2 * crop
    if OB < 1 or ON < 1:
        raise ValueError("conv_transpose2d: crop removes the whole output")
    # full correlation of the stuffed input == scatter with the flipped kernel
    Wf = kernel.data[::-1, ::-1]
    xf = x4.data.reshape(-1, kin)
    full = np.zeros((nb, FB, FN, kout), dtype=x4.dtype)
    for a in range(k):
        for c in range(k):
            full[:, a:a + stride * B:stride, c:c + stride * N:stride, :] += (xf @ Wf[a, c]).reshape(
                nb, B, N, kout
            )
    out = full[:, crop:crop + OB, crop:crop + ON, :].copy()
    if bias is not None:
        out += bias.data

    def bw(g):
        gfull = np.zeros((nb, FB, FN, kout), dtype=g.dtype)
        gfull[:, crop:crop + OB, crop:crop + ON, :] = g
        dxf = np.zeros_like(xf)
        dWf = np.empty_like(Wf)
        for a in range(k):
            for c in range(k):
                gs = gfull[:, a:a + stride * B:stride, c:c + stride * N:stride, :].reshape(-1, kout)
                dxf += gs @ Wf[a, c].T
                dWf[a, c] = xf.T @ gs
        db = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return dxf.reshape(x4.shape), dWf[::-1, ::-1].copy(), db

    inputs = (x4, kernel) + ((bias,) if bias is not None else ())
    y = record(out, inputs, bw, "conv_transpose2d")
    return _maybe_squeeze(y, squeeze)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd extents are padded with -inf.

    The gradient of each window goes to its first maximal element in
    row-major order.
    """
    x = as_tensor(x)
    x4, squeeze = _as4d(x)
    nb, B, N, K = x4.shape
    B2, N2 = -(-B // 2), -(-N // 2)
    xp = np.full((nb, 2 * B2, 2 * N2, K), -np.inf, dtype=x4.dtype)
    xp[:, :B, :N] = x4.data
    win = xp.reshape(nb, B2, 2, N2, 2, K).transpose(0, 1, 3, 5, 2, 4).reshape(nb, B2, N2, K, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((nb, B2, N2, K, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gp = gw.reshape(nb, B2, N2, K, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(nb, 2 * B2, 2 * N2, K)
        return (gp[:, :B, :N],)

    y = record(out, (x4,), bw, "maxpool2x2")
    return _maybe_squeeze(y, squeeze)


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    x = as_tensor(x)
    a = x.data
    pos = a > 0
    y = np.where(pos, a, np.expm1(np.minimum(a, 0.0)))
    return record(y, (x,), lambda g: (g * np.where(pos, 1.0, y + 1.0),), "elu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[K_in, K_out]``."""
    x = as_tensor(x)
    weight = as_tensor(weight, x.dtype)
    lead = x.shape[:-1]
    kin, kout = weight.shape
    if x.shape[-1] != kin:
        raise ValueError(f"linear: expected {kin} input features, got {x.shape[-1]}")
    xf = x.data.reshape(-1, kin)
    out = xf @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gf = g.reshape(-1, kout)
        return (
            (gf @ weight.data.T).reshape(x.shape),
            xf.T @ gf,
            gf.sum(axis=0) if bias is not None else None,
        )

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record(out.reshape(lead + (kout,)), inputs, bw, "linear")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer.

    The running averages are exponential moving averages with the usual
    start-up bias removed, so a handful of updates already gives usable
    statistics.
    """

    features: int
    momentum: float = 0.99
    eps: float = 1e-5
    ema_mean: np.ndarray = field(init=False)
    ema_var: np.ndarray = field(init=False)
    updates: int = 0

    def __post_init__(self):
        self.ema_mean = np.zeros(self.features)
        self.ema_var = np.zeros(self.features)

    @property
    def mean(self) -> np.ndarray:
        if self.updates == 0:
            return np.zeros(self.features)
        return self.ema_mean / (1.0 - self.momentum ** self.updates)

    @property
    def var(self) -> np.ndarray:
        if self.updates == 0:
            return np.ones(self.features)
        return self.ema_var / (1.0 - self.momentum ** self.updates)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.ema_mean = m * self.ema_mean + (1.0 - m) * mean
        self.ema_var = m * self.ema_var + (1.0 - m) * var
        self.updates += 1


def _feature_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # per-feature sum of a*b over all leading axes
    K = a.shape[-1]
    return np.einsum("ik,ik->k", a.reshape(-1, K), b.reshape(-1, K))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None = None,
    training: bool = True,
    mask: np.ndarray | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis but the last (feature) axis.

    In training mode the batch statistics are used and, if ``state`` is
    given, folded into its running averages. ``mask`` (broadcastable to
    ``x.shape[:-1]``) restricts the statistics to valid positions.
    In eval mode the running statistics of ``state`` are used.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma, x.dtype)
    beta = as_tensor(beta, x.dtype)
    K = x.shape[-1]
    a = x.data
    axes = tuple(range(a.ndim - 1))
    if state is not None:
        eps = state.eps

    if not training:
        if state is None or state.updates == 0:
            warnings.warn("batchnorm in eval mode without running statistics; using mean 0, var 1")
            mu, var = np.zeros(K), np.ones(K)
        else:
            mu, var = state.mean, state.var
        inv = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
        xhat = (a - mu.astype(a.dtype)) * inv
        y = xhat * gamma.data + beta.data

        def bw_eval(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return record(y, (x, gamma, beta), bw_eval, "batchnorm_eval")

    if mask is None:
        n = float(np.prod(a.shape[:-1]))
        if n <= 1:
            raise ValueError("batchnorm: training mode needs more than one element per feature")
        mu = a.mean(axis=axes)
        xc = a - mu
        var = _feature_dot(xc, xc) / n
        inv = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
        xhat = xc
        xhat *= inv
        y = xhat * gamma.data + beta.data
        if state is not None:
            state.update(mu.astype(np.float64), var.astype(np.float64))

        def bw_full(g):
            gx = g * gamma.data
            s1 = gx.sum(axis=axes) / n
            s2 = _feature_dot(gx, xhat) / n
            dx = gx - s1
            dx -= xhat * s2
            dx *= inv
            return dx, _feature_dot(g, xhat), g.sum(axis=axes)

        return record(y, (x, gamma, beta), bw_full, "batchnorm")

    w = np.broadcast_to(np.asarray(mask, dtype=a.dtype)[..., None], a.shape[:-1] + (1,))
    n = float(w.sum())
    if n <= 1:
        raise ValueError("batchnorm: training mode needs more than one element per feature")
    mu = (a * w).sum(axis=axes) / n
    xc = a - mu
    var = (w * xc * xc).sum(axis=axes) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    if state is not None:
        state.update(mu.astype(np.float64), var.astype(np.float64))

    def bw(g):
        gx = g * gamma.data
        s1 = gx.sum(axis=axes)
        s2 = (gx * xhat).sum(axis=axes)
        dx = inv * (gx - (w / n) * s1 - (w / n) * xhat * s2)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(y, (x, gamma, beta), bw, "batchnorm")


def apply_mask(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Zero a feature map at invalid positions; ``mask`` broadcasts to ``x.shape[:-1]``."""
    if mask is None:
        return x
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    return record(x.data * m, (x,), lambda g: (g * m,), "mask")


def _time_order(T: int, reverse: bool):
    return range(T - 1, -1, -1) if reverse else range(T)


def gru_seq(
    x: Tensor,
    w_x: Tensor,
    w_h: Tensor,
    b: Tensor,
    h0: Tensor | None = None,
    mask: np.ndarray | None = None,
    reverse: bool = False,
) -> Tensor:
    """Run a GRU over a sequence and return every hidden state.

    Parameters
    ----------
    x : Tensor
        ``[T, batch, K_in]`` step inputs.
    w_x, w_h, b : Tensor
        ``[K_in, 3H]``, ``[H, 3H]``, ``[3H]``; gate blocks ordered
        (reset, update, candidate).
    h0 : Tensor, optional
        ``[batch, H]`` initial state, zeros when omitted.
    mask : ndarray, optional
        ``[T, batch]``; at masked steps the state is carried through unchanged.
    reverse : bool
        Iterate from the last step to the first (outputs stay time-aligned).

    Notes
    -----
    ``r = s(x Wr + h Ur + br)``, ``z = s(x Wz + h Uz + bz)``,
    ``c = tanh(x Wc + (r*h) Uc + bc)``, ``h' = (1-z) h + z c``.
    """
    x = as_tensor(x)
    T, nb, kin = x.shape
    H = w_h.shape[0]
    if w_x.shape != (kin, 3 * H) or w_h.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise ValueError("gru_seq: weight shapes inconsistent with input width and hidden size")
    dt = x.dtype
    Wx, Wh, bb = w_x.data.astype(dt), w_h.data.astype(dt), b.data.astype(dt)
    P = (x.data.reshape(-1, kin) @ Wx + bb).reshape(T, nb, 3 * H)
    h = np.zeros((nb, H), dtype=dt) if h0 is None else h0.data.astype(dt).copy()
    m = None if mask is None else np.asarray(mask, dtype=dt)[..., None]

    hs = np.empty((T, nb, H), dtype=dt)
    hprev = np.empty((T, nb, H), dtype=dt)
    R = np.empty((T, nb, H), dtype=dt)
    Z = np.empty((T, nb, H), dtype=dt)
    C = np.empty((T, nb, H), dtype=dt)
    Whrz, Whc = Wh[:, :2 * H], Wh[:, 2 * H:]
    for t in _time_order(T, reverse):
        hprev[t] = h
        rz = _sigmoid(P[t, :, :2 * H] + h @ Whrz)
        r, z = rz[:, :H], rz[:, H:]
        c = np.tanh(P[t, :, 2 * H:] + (r * h) @ Whc)
        hn = h + z * (c - h)
        if m is not None:
            hn = h + m[t] * (hn - h)
        R[t], Z[t], C[t] = r, z, c
        hs[t] = hn
        h = hn

    def bw(g):
        dP = np.empty((T, nb, 3 * H), dtype=dt)
        dWh = np.zeros_like(Wh)
        dh = np.zeros((nb, H), dtype=dt)
        for t in _time_order(T, not reverse):
            dh = dh + g[t]
            hp, r, z, c = hprev[t], R[t], Z[t], C[t]
            if m is not None:
                dcarry = dh * (1.0 - m[t])
                dh = dh * m[t]
            else:
                dcarry = 0.0
            dz = dh * (c - hp)
            dc = dh * z
            dhp = dh * (1.0 - z) + dcarry
            dpc = dc * (1.0 - c * c)
            rh = r * hp
            drh = dpc @ Whc.T
            dr = drh * hp
            dhp += drh * r
            dpr = dr * r * (1.0 - r)
            dpz = dz * z * (1.0 - z)
            dprz = np.concatenate([dpr, dpz], axis=1)
            dhp += dprz @ Whrz.T
            dWh[:, :2 * H] += hp.T @ dprz
            dWh[:, 2 * H:] += rh.T @ dpc
            dP[t, :, :H], dP[t, :, H:2 * H], dP[t, :, 2 * H:] = dpr, dpz, dpc
            dh = dhp
        dPf = dP.reshape(-1, 3 * H)
        dx = (dPf @ Wx.T).reshape(T, nb, kin)
        dWx = x.data.reshape(-1, kin).T @ dPf
        db = dPf.sum(axis=0)
        return dx, dWx, dWh, db, (dh if h0 is not None else None)

    inputs = (x, w_x, w_h, b) + ((h0,) if h0 is not None else ())
    return record(hs, inputs, bw, "gru_seq")


def lstm_seq(
    x: Tensor,
    w_x: Tensor,
    w_h: Tensor,
    b: Tensor,
    h0: Tensor | None = None,
    c0: Tensor | None = None,
    reverse: bool = False,
) -> Tensor:
    """Run an LSTM over ``x`` (``[T, batch, K_in]``) and return all hidden states.

    Gate blocks in ``w_x`` (``[K_in, 4H]``), ``w_h`` (``[H, 4H]``) and ``b``
    are ordered (input, forget, cell, output).
    """
    x = as_tensor(x)
    T, nb, kin = x.shape
    H = w_h.shape[0]
    if w_x.shape != (kin, 4 * H) or w_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError("lstm_seq: weight shapes inconsistent with input width and hidden size")
    dt = x.dtype
    Wx, Wh, bb = w_x.data.astype(dt), w_h.data.astype(dt), b.data.astype(dt)
    P = (x.data.reshape(-1, kin) @ Wx + bb).reshape(T, nb, 4 * H)
    h = np.zeros((nb, H), dtype=dt) if h0 is None else h0.data.astype(dt).copy()
    c = np.zeros((nb, H), dtype=dt) if c0 is None else c0.data.astype(dt).copy()

    hs = np.empty((T, nb, H), dtype=dt)
    hprev = np.empty_like(hs)
    cprev = np.empty_like(hs)
    G = np.empty((T, nb, 4 * H), dtype=dt)
    TC = np.empty_like(hs)
    for t in _time_order(T, reverse):
        hprev[t], cprev[t] = h, c
        a = P[t] + h @ Wh
        gates = np.empty_like(a)
        gates[:, :2 * H] = _sigmoid(a[:, :2 * H])
        gates[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        gates[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        i, f, gg, o = np.split(gates, 4, axis=1)
        c = f * c + i * gg
        tc = np.tanh(c)
        h = o * tc
        G[t], TC[t], hs[t] = gates, tc, h

    def bw(g):
        dA = np.empty((T, nb, 4 * H), dtype=dt)
        dWh = np.zeros_like(Wh)
        dh = np.zeros((nb, H), dtype=dt)
        dcn = np.zeros((nb, H), dtype=dt)
        for t in _time_order(T, not reverse):
            dh = dh + g[t]
            i, f, gg, o = np.split(G[t], 4, axis=1)
            tc = TC[t]
            do = dh * tc
            dc = dcn + dh * o * (1.0 - tc * tc)
            di = dc * gg
            dg = dc * i
            df = dc * cprev[t]
            dcn = dc * f
            da = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - gg * gg), do * o * (1 - o)], axis=1
            )
            dA[t] = da
            dWh += hprev[t].T @ da
            dh = da @ Wh.T
        dAf = dA.reshape(-1, 4 * H)
        dx = (dAf @ Wx.T).reshape(T, nb, kin)
        dWx = x.data.reshape(-1, kin).T @ dAf
        db = dAf.sum(axis=0)
        return (
            dx,
            dWx,
            dWh,
            db,
            dh if h0 is not None else None,
            dcn if c0 is not None else None,
        )

    inputs = [x, w_x, w_h, b]
    # keep positional alignment with bw's return tuple
    inputs.append(h0 if h0 is not None else Tensor(np.zeros(0)))
    inputs.append(c0 if c0 is not None else Tensor(np.zeros(0)))
    return record(hs, tuple(inputs), bw, "lstm_seq")
