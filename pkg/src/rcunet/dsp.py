"""Log-mel feature extraction and waveform reconstruction.

Analysis runs at 8 kHz with 200-sample (25 ms) periodic-Hann frames every
80 samples (10 ms), each zero-padded to a 512-point FFT. A 64-band HTK mel
filterbank spanning 0-4000 Hz compresses the 257 one-sided bins; the
network sees the natural log of the result.

Reconstruction inverts the mel step with the filterbank pseudoinverse,
reattaches the noisy phase, and overlap-adds with squared-window-sum
normalization (least-squares inverse STFT).
"""
from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 8000
FRAME_LEN = 200
FRAME_STEP = 80
N_FFT = 512
N_BINS = N_FFT // 2 + 1
N_MELS = 64
LOG_FLOOR = 1e-7
SUPPORTED_RATES = (8000, 10000, 16000)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("Waveform must be mono (1-D samples)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    logmel: np.ndarray  # [64, N]
    phase: np.ndarray  # [257, N]
    length: int  # waveform length the frames came from
    frame_step: int = FRAME_STEP
    frame_len: int = FRAME_LEN
    n_fft: int = N_FFT

    def __post_init__(self):
        if self.logmel.shape[0] != N_MELS or self.phase.shape[0] != self.n_fft // 2 + 1:
            raise ValueError("Spectrogram: unexpected band/bin counts")
        if self.logmel.shape[1] != self.phase.shape[1]:
            raise ValueError("Spectrogram: frame count differs between logmel and phase")

    @property
    def n_frames(self) -> int:
        return self.logmel.shape[1]


@dataclass(frozen=True)
class MelBank:
    weights: np.ndarray  # [64, 257]
    pinv: np.ndarray  # [257, 64]
    centers_hz: np.ndarray


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def melbank_build(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0, fmax: float | None = None,
) -> MelBank:
    """Triangular HTK-mel filterbank evaluated at the FFT bin centres.

    Filters have unit peak. The pseudoinverse is computed once (SVD based).
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ce, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (ce - lo)
    down = (hi - freqs) / (hi - ce)
    W = np.maximum(0.0, np.minimum(up, down))
    W.setflags(write=False)
    P = np.linalg.pinv(W)
    P.setflags(write=False)
    return MelBank(W, P, edges[1:-1].copy())


def periodic_hann(n: int) -> np.ndarray:
    return signal.get_window("hann", n, fftbins=True)


def n_frames_for(length: int) -> int:
    return 1 + (length - FRAME_LEN) // FRAME_STEP


def stft(w: Waveform | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-sided STFT magnitude and phase, each ``[257, N]``."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if isinstance(w, Waveform) and w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"stft expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    if len(x) < FRAME_LEN:
        raise ValueError(f"stft needs at least {FRAME_LEN} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::FRAME_STEP]
    spec = np.fft.rfft(frames * periodic_hann(FRAME_LEN), n=N_FFT, axis=1).T
    return np.abs(spec), np.angle(spec)


NORM_FLOOR = 0.1


def istft(magnitude: np.ndarray, phase: np.ndarray, length: int | None = None) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (windowed overlap-add).

    Output has ``80*(N-1)+200`` samples, zero-padded or cut to ``length``.
    """
    if magnitude.shape != phase.shape:
        raise ValueError("istft: magnitude and phase shapes differ")
    n = magnitude.shape[1]
    frames = np.fft.irfft(magnitude * np.exp(1j * phase), n=N_FFT, axis=0)[:FRAME_LEN].T
    win = periodic_hann(FRAME_LEN)
    total = FRAME_STEP * (n - 1) + FRAME_LEN
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n):
        s = i * FRAME_STEP
        out[s:s + FRAME_LEN] += frames[i] * win
        norm[s:s + FRAME_LEN] += win * win
    # the window sum vanishes at both ends; flooring it stops edge samples of a
    # modified spectrogram from being amplified without bound
    out /= np.maximum(norm, NORM_FLOOR * norm.max())
    if length is not None:
        out = np.pad(out, (0, max(0, length - total)))[:length]
    return out


def features(w: Waveform) -> Spectrogram:
    """Waveform -> natural-log mel magnitudes (floored at 1e-7) plus STFT phase."""
    mag, phase = stft(w)
    mel = melbank_build().weights @ mag
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)), phase, len(w))


def reconstruct(logmel_hat: np.ndarray, phase: np.ndarray, length: int | None = None) -> Waveform:
    """Enhanced log-mel + noisy phase -> waveform.

    Negative magnitudes produced by the pseudoinverse are clamped to zero.
    """
    logmel_hat = np.asarray(logmel_hat, dtype=np.float64)
    if logmel_hat.shape[1] != phase.shape[1]:
        raise ValueError(
            f"reconstruct: {logmel_hat.shape[1]} mel frames but {phase.shape[1]} phase frames"
        )
    mag = np.maximum(melbank_build().pinv @ np.exp(logmel_hat), 0.0)
    return Waveform(istft(mag, phase, length), SAMPLE_RATE)


# -- resampling ------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _resample_filter(up: int, down: int) -> np.ndarray:
    # cutoff at the lower Nyquist; the long Kaiser window keeps 0-0.975*Nyquist flat
    ratio = max(up, down)
    half = 128 * ratio
    # resample_poly applies the gain of `up` itself
    return signal.firwin(2 * half + 1, 1.0 / ratio, window=("kaiser", 10.0))


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Windowed-sinc polyphase resampling between the supported rates."""
    if w.sample_rate == target_hz:
        return Waveform(w.samples.copy(), target_hz)
    if w.sample_rate not in SUPPORTED_RATES or target_hz not in SUPPORTED_RATES:
        raise ValueError(
            f"unsupported rate conversion {w.sample_rate} -> {target_hz}; "
            f"supported rates are {SUPPORTED_RATES}"
        )
    frac = Fraction(target_hz, w.sample_rate)
    up, down = frac.numerator, frac.denominator
    y = signal.resample_poly(w.samples, up, down, window=_resample_filter(up, down))
    return Waveform(y, target_hz)


# -- WAV I/O ---------------------------------------------------------------

def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file into floats in [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV not supported")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(x, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write 16-bit little-endian PCM, clipping to the representable range."""
    q = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(q.tobytes())
