"""Separation quality (SDR / SIR / SAR) and intelligibility (STOI).

The SDR family follows the BSS-eval decomposition: the estimate is split
into a target part (projection onto the source and its delayed copies),
interference (what the joint source+noise projection adds to that), and
artifacts (the remainder). STOI follows the original short-time objective
intelligibility measure computed at 10 kHz.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.signal import fftconvolve

from .dsp import Waveform, resample

SENTINEL_DB = 200.0
# error energies below this fraction of the estimate energy are numerically zero
_ZERO_ENERGY = 1e-10


@dataclass(frozen=True)
class BssResult:
    sdr_db: float
    sir_db: float
    sar_db: float
    target_energy: float = 0.0
    interf_energy: float = 0.0
    artif_energy: float = 0.0
    estimate_energy: float = 0.0


@dataclass(frozen=True)
class StoiResult:
    score: float

    def __float__(self) -> float:
        return self.score


def _ratio_db(num: float, den: float, floor: float) -> float:
    if den <= floor:
        return SENTINEL_DB
    if num <= 0:
        return -SENTINEL_DB
    return float(np.clip(10.0 * np.log10(num / den), -SENTINEL_DB, SENTINEL_DB))


def _xcorr(a: np.ndarray, b: np.ndarray, lags: int) -> np.ndarray:
    """c[k] = sum_t a[t] b[t+k] for k = -(lags-1) .. lags-1."""
    full = fftconvolve(b, a[::-1])  # index len(a)-1 is lag 0
    pad = np.pad(full, (lags, lags))
    mid = len(a) - 1 + lags
    return pad[mid - (lags - 1):mid + lags]


def _project(refs: list[np.ndarray], est: np.ndarray, L: int) -> np.ndarray:
    """Least-squares projection of ``est`` onto delayed copies (0..L-1) of ``refs``.

    Works in the zero-extended domain of length T+L-1, where the Gram matrix
    of delayed copies is exactly block-Toeplitz.
    """
    T = len(est)
    n = len(refs)
    G = np.empty((n * L, n * L))
    for i in range(n):
        for j in range(i, n):
            c = _xcorr(refs[i], refs[j], L)  # <r_i delayed p, r_j delayed q> = c[p-q]
            block = linalg.toeplitz(c[L - 1:], c[L - 1::-1])
            G[i * L:(i + 1) * L, j * L:(j + 1) * L] = block
            if i != j:
                G[j * L:(j + 1) * L, i * L:(i + 1) * L] = block.T
    D = np.concatenate([_xcorr(r, est, L)[L - 1:] for r in refs])
    lam = 1e-10 * max(np.trace(G) / (n * L), 1e-300)
    coef = linalg.solve(G + lam * np.eye(n * L), D, assume_a="pos")
    out = np.zeros(T + L - 1)
    for i, r in enumerate(refs):
        out += fftconvolve(r, coef[i * L:(i + 1) * L])
    return out


def bss_eval(estimate, source, noise, filter_len: int = 512) -> BssResult:
    """SDR, SIR and SAR (dB) of ``estimate`` against ``source`` with interferer ``noise``.

    Values saturate at +/-200 dB; an error term whose energy is below
    1e-10 of the estimate energy counts as exactly zero.
    """
    est = _samples(estimate)
    s = _samples(source)
    n = _samples(noise)
    if not (len(est) == len(s) == len(n)):
        raise ValueError("bss_eval: estimate, source and noise must have equal length")
    if _rate(estimate) != _rate(source) or _rate(source) != _rate(noise):
        raise ValueError("bss_eval: sample rates differ")
    if not np.any(s):
        raise ValueError("bss_eval: source has zero energy")
    L = int(filter_len)
    est_ext = np.concatenate([est, np.zeros(L - 1)])
    s_target = _project([s], est, L)
    if np.any(n):
        p_joint = _project([s, n], est, L)
    else:
        p_joint = s_target
    e_interf = p_joint - s_target
    e_artif = est_ext - p_joint

    E = float(est @ est)
    floor = _ZERO_ENERGY * E
    t_e = float(s_target @ s_target)
    i_e = float(e_interf @ e_interf)
    a_e = float(e_artif @ e_artif)
    dist = e_interf + e_artif
    d_e = float(dist @ dist)
    ti = s_target + e_interf
    return BssResult(
        sdr_db=_ratio_db(t_e, d_e, floor),
        sir_db=_ratio_db(t_e, i_e, floor),
        sar_db=_ratio_db(float(ti @ ti), a_e, floor),
        target_energy=t_e,
        interf_energy=i_e,
        artif_energy=a_e,
        estimate_energy=E,
    )


def _samples(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)


def _rate(w):
    return w.sample_rate if isinstance(w, Waveform) else None


# -- STOI ------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary band-membership matrix ``[num_bands, nfft//2+1]`` and centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    cf = 2.0 ** (k / 3) * min_freq
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm, cf


def _stoi_window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    if len(x) < n:
        return np.zeros((0, n))
    return np.lib.stride_tricks.sliding_window_view(x, n)[::hop]


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range=STOI_DYN_RANGE,
                         framelen=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest clean frame, then overlap-add."""
    w = _stoi_window(framelen)
    xf = _frames(x, framelen, hop) * w
    yf = _frames(y, framelen, hop) * w
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energies > energies.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    out_len = (n - 1) * hop + framelen if n else 0
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i in range(n):
        xs[i * hop:i * hop + framelen] += xf[i]
        ys[i * hop:i * hop + framelen] += yf[i]
    return xs, ys


def _tob_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2) * _stoi_window(STOI_FRAME)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1).T
    return np.sqrt(obm @ (np.abs(spec) ** 2))


def stoi(clean, processed, fs: int | None = None) -> StoiResult:
    """Short-time objective intelligibility of ``processed`` against ``clean``.

    Both inputs are brought to 10 kHz first. Score is the mean correlation of
    clipped, normalized one-third-octave envelopes over 30-frame segments.
    """
    if isinstance(clean, Waveform):
        fs = clean.sample_rate
    if fs is None:
        raise ValueError("stoi: sample rate unknown; pass Waveforms or fs=")
    x = _samples(clean)
    y = _samples(processed)
    if len(x) != len(y):
        raise ValueError("stoi: clean and processed must have equal length")
    if not np.any(x):
        raise ValueError("stoi: clean signal is silent")
    if fs != STOI_FS:
        x = resample(Waveform(x, fs), STOI_FS).samples
        y = resample(Waveform(y, fs), STOI_FS).samples

    x, y = remove_silent_frames(x, y)
    obm, _ = third_octave_bands()
    X = _tob_envelopes(x, obm)
    Y = _tob_envelopes(y, obm)
    if X.shape[1] < STOI_SEGMENT:
        raise ValueError("stoi: not enough speech frames for one 30-frame segment")

    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    scores = []
    for m in range(STOI_SEGMENT, X.shape[1] + 1):
        xs = X[:, m - STOI_SEGMENT:m]
        ys = Y[:, m - STOI_SEGMENT:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yp = np.minimum(ys * alpha, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + _EPS
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + _EPS
        scores.append(np.sum(xc * yc, axis=1))
    return StoiResult(float(np.mean(scores)))


# -- reports ---------------------------------------------------------------

REPORT_HEADER = ("id", "noise_kind", "snr_db", "sdr", "sir", "sar", "stoi")


@dataclass
class EvalRow:
    id: str
    noise_kind: str
    snr_db: float
    sdr: float
    sir: float
    sar: float
    stoi: float


def mean_row(rows: list[EvalRow], id: str = "mean") -> EvalRow:
    return EvalRow(
        id,
        "all",
        float(np.mean([r.snr_db for r in rows])),
        float(np.mean([r.sdr for r in rows])),
        float(np.mean([r.sir for r in rows])),
        float(np.mean([r.sar for r in rows])),
        float(np.mean([r.stoi for r in rows])),
    )


def write_report(path: str | Path, rows: list[EvalRow], mean_id: str = "mean",
                 extra: list[EvalRow] = ()) -> EvalRow:
    """Write per-utterance rows, a row of their means, then any ``extra`` rows.

    Returns the mean row.
    """
    mean = mean_row(rows, mean_id)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(REPORT_HEADER)
        for r in rows + [mean] + list(extra):
            wr.writerow([r.id, r.noise_kind, f"{r.snr_db:.4f}", f"{r.sdr:.4f}", f"{r.sir:.4f}",
                         f"{r.sar:.4f}", f"{r.stoi:.6f}"])
    return mean


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
