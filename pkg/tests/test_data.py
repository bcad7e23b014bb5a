import numpy as np
import pytest
from scipy import signal, stats

from rcunet import data
from rcunet.data import CorpusManifest, mix_at_snr, synth_noise, synth_speech
from rcunet.dsp import Waveform
from rcunet.metrics import bss_eval


def centroid(x, fs=8000):
    f, p = signal.welch(x, fs, nperseg=512)
    return float((f * p).sum() / p.sum())


def test_speech_is_deterministic():
    a, b = synth_speech(7, 1.0), synth_speech(7, 1.0)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.array_equal(a.samples, synth_speech(8, 1.0).samples)


@pytest.mark.parametrize("seed", range(4))
def test_speech_shape(seed):
    x = synth_speech(seed, 1.5)
    assert len(x) == 12000
    assert np.max(np.abs(x.samples)) == pytest.approx(0.5)
    assert np.sqrt(np.mean(x.samples ** 2)) > 0.01
    assert centroid(x.samples) < 2500


@pytest.mark.parametrize("kind", data.NOISE_KINDS)
def test_noise_is_deterministic(kind):
    assert synth_noise(3, 0.5, kind).samples.tobytes() == synth_noise(3, 0.5, kind).samples.tobytes()


def test_unknown_noise_kind():
    with pytest.raises(ValueError, match="babble"):
        synth_noise(0, 0.5, "traffic")


def test_babble_spectrum_follows_speech():
    f, p_speech = signal.welch(synth_speech(11, 3.0).samples, 8000, nperseg=512)
    _, p_babble = signal.welch(synth_noise(11, 3.0, "babble").samples, 8000, nperseg=512)
    edges = np.linspace(100, 3800, 9)
    for lo, hi in zip(edges[:-1], edges[1:]):
        band = (f >= lo) & (f < hi)
        diff = 10 * np.log10(p_babble[band].mean() / p_speech[band].mean())
        # both peak-normalized; babble is a sum of eight talkers so its level differs
        assert abs(diff - 10 * np.log10(p_babble.mean() / p_speech.mean())) < 10


def test_factory_is_more_impulsive_than_babble():
    k_f = np.mean([stats.kurtosis(synth_noise(s, 1.0, "factory").samples) for s in range(16)])
    k_b = np.mean([stats.kurtosis(synth_noise(s, 1.0, "babble").samples) for s in range(16)])
    assert k_f > k_b


@pytest.mark.parametrize("snr", [0.0, -10.0, 5.0])
def test_mix_hits_snr(snr, rng):
    clean = Waveform(rng.normal(size=4000))
    noise = Waveform(rng.normal(size=5000))
    mix, scaled = mix_at_snr(clean, noise, snr, rng)
    ratio = (clean.samples @ clean.samples) / (scaled.samples @ scaled.samples)
    assert 10 * np.log10(ratio) == pytest.approx(snr, abs=1e-9)
    np.testing.assert_array_equal(mix.samples, clean.samples + scaled.samples)


def test_mix_large_snr_is_nearly_clean(rng):
    clean = Waveform(rng.normal(size=1000))
    mix, _ = mix_at_snr(clean, Waveform(rng.normal(size=1000)), 200.0)
    np.testing.assert_allclose(mix.samples, clean.samples, atol=1e-8)


def test_mix_needs_enough_noise(rng):
    with pytest.raises(ValueError, match="shorter"):
        mix_at_snr(Waveform(np.ones(10)), Waveform(np.ones(5)))


def test_utterance_ids_and_kinds(tiny_manifest, tiny_train):
    assert [u.id for u in tiny_train] == ["train_0000", "train_0001", "train_0002"]
    assert [u.noise_kind for u in tiny_train] == ["babble", "factory", "babble"]
    for u in tiny_train:
        assert tiny_manifest.min_duration <= u.clean.duration <= tiny_manifest.max_duration + 1e-9
        np.testing.assert_array_equal(u.mixture.samples, u.clean.samples + u.noise.samples)


def test_utterances_are_order_independent(tiny_manifest, tiny_train):
    u = data.make_utterance(tiny_manifest, "train", 2)
    assert u.mixture.samples.tobytes() == tiny_train[2].mixture.samples.tobytes()


@pytest.mark.parametrize("snr", [0.0, -5.0])
def test_mixture_sdr_near_snr(snr):
    # default 2-4 s lengths; on ~1 s clips the 512-tap projection absorbs enough noise to bias SDR upward
    m = CorpusManifest(seed=11, train_count=0, test_count=3, snr_db=snr)
    for u in data.generate(m, "test"):
        assert abs(bss_eval(u.mixture, u.clean, u.noise).sdr_db - snr) < 1.0


def test_manifest_text_round_trip():
    m = CorpusManifest(seed=9, train_count=5, test_count=2, snr_db=-5.0, noise_kind="factory")
    assert CorpusManifest.from_text(m.to_text()) == m


def test_corpus_on_disk(tmp_path):
    m = CorpusManifest(seed=1, train_count=2, test_count=1, min_duration=0.5, max_duration=0.8)
    data.write_corpus(tmp_path / "a", m)
    data.write_corpus(tmp_path / "b", m)
    files = data.checksum_dir(tmp_path / "a")
    assert files == data.checksum_dir(tmp_path / "b")
    assert sorted(files) == [
        "manifest",
        "test/test_0000_clean.wav", "test/test_0000_mix.wav", "test/test_0000_noise.wav",
        "train/train_0000_clean.wav", "train/train_0000_mix.wav", "train/train_0000_noise.wav",
        "train/train_0001_clean.wav", "train/train_0001_mix.wav", "train/train_0001_noise.wav",
    ]
    assert data.read_manifest(tmp_path / "a") == m
    loaded = data.load_corpus(tmp_path / "a", "train")
    original = data.generate(m, "train")
    for a, b in zip(loaded, original):
        assert a.id == b.id
        assert np.max(np.abs(a.clean.samples - b.clean.samples)) < 1e-4
        np.testing.assert_array_equal(a.mixture.samples, a.clean.samples + a.noise.samples)
