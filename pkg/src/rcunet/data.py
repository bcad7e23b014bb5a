"""Synthetic desk-scale corpus: speech-like and noise-like signals, SNR mixing, WAV layout.

Every utterance draws its random stream from ``(seed, split, index)``, so a
corpus regenerates bit-identically from its manifest and utterances can be
produced in any order.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, Waveform, features, read_wav, write_wav

NOISE_KINDS = ("babble", "factory")
_SPLIT_SALT = {"train": 1, "test": 2}


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _resonator(f0: float, bw: float, fs: int):
    """Second-order all-pole resonator (b, a) with unit gain at its peak."""
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * f0 / fs
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    # peak gain of 1/|A(e^{j theta})|
    g = abs(np.polyval(a[::-1], np.exp(-1j * theta)))
    return np.array([g]), a


def synth_speech(seed: int, duration: float, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Speech-like signal: glottal-ish harmonics through three moving formants.

    The fundamental drifts within 90-250 Hz, a 3-6 Hz syllabic envelope gates
    the voicing, and short noise bursts stand in for unvoiced consonants.
    Peak-normalized to 0.5.
    """
    rng = _rng(seed, 0x5EEC)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    # fundamental: slow random walk in log-frequency, reflected into range
    base = rng.uniform(110, 200)
    knots = max(4, int(duration * 4))
    drift = np.interp(t, np.linspace(0, duration, knots), rng.normal(0, 0.15, knots))
    f0 = np.clip(base * np.exp(drift), 90.0, 250.0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(sample_rate / 2 / 90)
    k = np.arange(1, n_harm + 1)[:, None]
    amps = (1.0 / k) * (k * f0[None, :] < 0.95 * sample_rate / 2)
    voiced = np.sum(amps * np.sin(k * phase[None, :]), axis=0)

    # syllabic modulation
    rate = rng.uniform(3.0, 6.0)
    sy_phase = rng.uniform(0, 2 * np.pi)
    env = np.clip(np.sin(2 * np.pi * rate * t + sy_phase), 0, None) ** 1.5

    # formant tracks (Hz) interpolated between random targets
    n_targets = max(3, int(duration * rate) + 2)
    tt = np.linspace(0, duration, n_targets)
    tracks = [
        np.interp(t, tt, rng.uniform(300, 850, n_targets)),
        np.interp(t, tt, rng.uniform(900, 2200, n_targets)),
        np.interp(t, tt, rng.uniform(2300, 3200, n_targets)),
    ]
    bws = (80.0, 120.0, 180.0)

    # unvoiced bursts placed in envelope troughs
    burst = np.zeros(n)
    n_bursts = rng.poisson(max(1.0, duration * rate * 0.5))
    for _ in range(n_bursts):
        start = rng.integers(0, max(1, n - 800))
        length = int(rng.uniform(0.03, 0.08) * sample_rate)
        seg = rng.normal(0, 1, min(length, n - start)) * np.hanning(min(length, n - start))
        burst[start:start + len(seg)] += 0.25 * seg
    b_hp, a_hp = signal.butter(2, 2000, btype="high", fs=sample_rate)
    burst = signal.lfilter(b_hp, a_hp, burst)

    # formant filtering, block-wise so the resonances can move
    block = 80
    y = np.zeros(n)
    src = voiced * env
    weights = (1.0, 0.6, 0.3)
    for track, bw, wgt in zip(tracks, bws, weights):
        zi = np.zeros(2)
        out = np.empty(n)
        for s in range(0, n, block):
            b, a = _resonator(track[s], bw, sample_rate)
            out[s:s + block], zi = signal.lfilter(b, a, src[s:s + block], zi=zi)
        y += wgt * out
    y += burst
    peak = np.max(np.abs(y))
    return Waveform(0.5 * y / peak if peak > 0 else y, sample_rate)


def synth_noise(seed: int, duration: float, kind: str, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Babble-like (8 overlapping talkers) or factory-like (resonant hum plus clanks) noise."""
    n = int(round(duration * sample_rate))
    if kind == "babble":
        y = np.zeros(n)
        for i in range(8):
            y += synth_speech(int(seed) * 8 + i + 7919, duration, sample_rate).samples
    elif kind == "factory":
        rng = _rng(seed, 0xFAC7)
        white = rng.normal(0, 1, n)
        y = 0.3 * signal.lfilter(*signal.butter(1, 1500, fs=sample_rate), white)
        for _ in range(4):
            f = rng.uniform(150, 3500)
            b, a = _resonator(f, rng.uniform(30, 150), sample_rate)
            y += rng.uniform(0.1, 0.4) * signal.lfilter(b, a, white) * (f / 1000.0) ** -0.5
        # machinery hum with harmonics
        t = np.arange(n) / sample_rate
        hum = rng.uniform(50, 120)
        y += 0.2 * sum(np.sin(2 * np.pi * hum * h * t + rng.uniform(0, 6.3)) / h for h in range(1, 6))
        # Poisson impulsive clanks: decaying sinusoid bursts
        n_clank = rng.poisson(duration * 3.0)
        for _ in range(n_clank):
            start = rng.integers(0, n)
            length = min(n - start, int(0.12 * sample_rate))
            tt = np.arange(length) / sample_rate
            f = rng.uniform(600, 3000)
            y[start:start + length] += rng.uniform(2.0, 6.0) * np.exp(-tt * rng.uniform(40, 90)) * np.sin(
                2 * np.pi * f * tt
            )
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    peak = np.max(np.abs(y))
    return Waveform(0.5 * y / peak if peak > 0 else y, sample_rate)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float = 0.0, rng: np.random.Generator | None = None):
    """Crop ``noise`` to the clean length (random offset) and scale it to ``snr_db``.

    Returns ``(mixture, scaled_noise)`` with ``mixture == clean + scaled_noise``.
    """
    if len(noise) < len(clean):
        raise ValueError("mix_at_snr: noise shorter than clean signal")
    offset = 0 if rng is None else int(rng.integers(0, len(noise) - len(clean) + 1))
    nz = noise.samples[offset:offset + len(clean)]
    e_clean = float(clean.samples @ clean.samples)
    e_noise = float(nz @ nz)
    if e_noise == 0:
        raise ValueError("mix_at_snr: noise segment is silent")
    g = np.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    scaled = g * nz
    return Waveform(clean.samples + scaled, clean.sample_rate), Waveform(scaled, clean.sample_rate)


@dataclass
class Utterance:
    id: str
    clean: Waveform
    noise: Waveform
    mixture: Waveform
    snr_db: float
    noise_kind: str
    _feats: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not (len(self.clean) == len(self.noise) == len(self.mixture)):
            raise ValueError(f"{self.id}: clean/noise/mixture lengths differ")

    def spectrograms(self):
        """(mixture, clean, noise) spectrograms, computed once."""
        if not self._feats:
            self._feats["mix"] = features(self.mixture)
            self._feats["clean"] = features(self.clean)
            self._feats["noise"] = features(self.noise)
        return self._feats["mix"], self._feats["clean"], self._feats["noise"]


@dataclass
class CorpusManifest:
    seed: int = 0
    train_count: int = 64
    test_count: int = 16
    min_duration: float = 2.0
    max_duration: float = 4.0
    snr_db: float = 0.0
    noise_kind: str = "both"
    sample_rate: int = SAMPLE_RATE

    def kind_for(self, index: int) -> str:
        if self.noise_kind == "both":
            return NOISE_KINDS[index % 2]
        return self.noise_kind

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.__dict__.items())

    @classmethod
    def from_text(cls, text: str) -> "CorpusManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        types = {k: type(v) for k, v in cls().__dict__.items()}
        known = {k: types[k](v) for k, v in kv.items() if k in types}
        return cls(**known)


def make_utterance(manifest: CorpusManifest, split: str, index: int) -> Utterance:
    rng = _rng(manifest.seed, _SPLIT_SALT[split], index)
    duration = round(float(rng.uniform(manifest.min_duration, manifest.max_duration)), 2)
    speech_seed = int(rng.integers(0, 2**31))
    noise_seed = int(rng.integers(0, 2**31))
    kind = manifest.kind_for(index)
    clean = synth_speech(speech_seed, duration, manifest.sample_rate)
    noise = synth_noise(noise_seed, duration + 0.5, kind, manifest.sample_rate)
    mixture, scaled = mix_at_snr(clean, noise, manifest.snr_db, rng)
    return Utterance(f"{split}_{index:04d}", clean, scaled, mixture, manifest.snr_db, kind)


def generate(manifest: CorpusManifest, split: str) -> list[Utterance]:
    count = manifest.train_count if split == "train" else manifest.test_count
    return [make_utterance(manifest, split, i) for i in range(count)]


def write_corpus(out_dir: str | Path, manifest: CorpusManifest) -> Path:
    """Write ``{train,test}/{id}_{clean,noise,mix}.wav`` plus ``manifest``."""
    root = Path(out_dir)
    for split in ("train", "test"):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for u in generate(manifest, split):
            write_wav(d / f"{u.id}_clean.wav", u.clean)
            write_wav(d / f"{u.id}_noise.wav", u.noise)
            write_wav(d / f"{u.id}_mix.wav", u.mixture)
    (root / "manifest").write_text(manifest.to_text())
    return root


def read_manifest(corpus_dir: str | Path) -> CorpusManifest:
    return CorpusManifest.from_text((Path(corpus_dir) / "manifest").read_text())


def load_corpus(corpus_dir: str | Path, split: str) -> list[Utterance]:
    """Load one split from disk.

    The mixture on disk is quantized to 16 bits, so it is rebuilt as
    ``clean + noise`` from the stored stems to keep the mixing identity exact.
    """
    root = Path(corpus_dir)
    manifest = read_manifest(root)
    count = manifest.train_count if split == "train" else manifest.test_count
    out = []
    for i in range(count):
        uid = f"{split}_{i:04d}"
        clean = read_wav(root / split / f"{uid}_clean.wav")
        noise = read_wav(root / split / f"{uid}_noise.wav")
        mix = Waveform(clean.samples + noise.samples, clean.sample_rate)
        out.append(Utterance(uid, clean, noise, mix, manifest.snr_db, manifest.kind_for(i)))
    return out


def checksum_dir(path: str | Path) -> dict[str, str]:
    root = Path(path)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }
