import numpy as np
import pytest
from scipy import linalg

from rcunet.dsp import Waveform
from rcunet.metrics import (
    REPORT_HEADER,
    SENTINEL_DB,
    EvalRow,
    _project,
    bss_eval,
    read_report,
    stoi,
    write_report,
)


def delayed(x, L):
    """[T+L-1, L] matrix whose columns are x delayed by 0..L-1 samples."""
    T = len(x)
    A = np.zeros((T + L - 1, L))
    for d in range(L):
        A[d:d + T, d] = x
    return A


def lstsq_projection(refs, est, L):
    A = np.hstack([delayed(r, L) for r in refs])
    e = np.concatenate([est, np.zeros(L - 1)])
    coef = linalg.lstsq(A, e)[0]
    return A @ coef


@pytest.fixture
def signals(rng):
    T = 1500
    s = np.convolve(rng.normal(size=T), [1.0, 0.6, 0.2], mode="same")
    n = rng.normal(size=T)
    return s, n


@pytest.mark.parametrize("L", [1, 4, 16])
def test_projection_matches_lstsq(signals, rng, L):
    s, n = signals
    est = 0.7 * s + 0.3 * np.roll(n, 2) + 0.1 * rng.normal(size=len(s))
    np.testing.assert_allclose(_project([s, n], est, L), lstsq_projection([s, n], est, L), atol=1e-8)
    np.testing.assert_allclose(_project([s], est, L), lstsq_projection([s], est, L), atol=1e-8)


def test_energy_decomposition(signals, rng):
    s, n = signals
    est = 0.8 * s + 0.5 * n + 0.2 * rng.normal(size=len(s))
    r = bss_eval(est, s, n, filter_len=32)
    total = r.target_energy + r.interf_energy + r.artif_energy
    assert total == pytest.approx(r.estimate_energy, rel=1e-6)


def test_filter_len_one_matches_correlation_formulas(rng):
    T = 2000
    s = rng.normal(size=T)
    n = rng.normal(size=T)
    n -= (n @ s) / (s @ s) * s  # orthogonal to the source
    art = rng.normal(size=T)
    est = 1.3 * s + 0.4 * n + 0.2 * art
    target = (est @ s) / (s @ s) * s
    interf = (est @ n) / (n @ n) * n
    artif = est - target - interf
    r = bss_eval(est, s, n, filter_len=1)
    assert r.sdr_db == pytest.approx(10 * np.log10(target @ target / ((est - target) @ (est - target))), abs=1e-9)
    assert r.sir_db == pytest.approx(10 * np.log10(target @ target / (interf @ interf)), abs=1e-9)
    assert r.sar_db == pytest.approx(
        10 * np.log10((target + interf) @ (target + interf) / (artif @ artif)), abs=1e-9)


def test_orthogonal_residual_closed_form(signals, rng):
    s, n = signals
    L = 24
    T = len(s)
    A = np.hstack([delayed(s, L), delayed(n, L)])[:T]
    r = rng.normal(size=T)
    e = 0.3 * (r - A @ linalg.lstsq(A, r)[0])
    res = bss_eval(s + e, s, n, filter_len=L)
    expected = 10 * np.log10((s @ s) / (e @ e))
    assert res.sdr_db == pytest.approx(expected, abs=0.01)
    assert res.sar_db == pytest.approx(expected, abs=0.01)
    assert res.sir_db == SENTINEL_DB


@pytest.mark.parametrize("gain", [1.0, 2.0, -0.5])
def test_scaled_source_is_perfect(signals, gain):
    s, n = signals
    r = bss_eval(gain * s, s, n, filter_len=64)
    assert r.sdr_db == r.sir_db == r.sar_db == SENTINEL_DB


def test_gain_invariance(signals, rng):
    s, n = signals
    est = s + 0.5 * n + 0.1 * rng.normal(size=len(s))
    a, b = bss_eval(est, s, n, 64), bss_eval(3.7 * est, s, n, 64)
    assert (a.sdr_db, a.sir_db, a.sar_db) == pytest.approx((b.sdr_db, b.sir_db, b.sar_db), abs=1e-8)


def test_mixture_sdr_tracks_snr(rng):
    # long enough that 512 delayed copies span a small part of the signal space
    s = np.convolve(rng.normal(size=16000), [1.0, 0.6, 0.2], mode="same")
    n = rng.normal(size=16000)
    n *= np.sqrt((s @ s) / (n @ n))
    assert abs(bss_eval(s + n, s, n).sdr_db) < 1.0


def test_bss_rejects_bad_inputs(signals):
    s, n = signals
    with pytest.raises(ValueError, match="equal length"):
        bss_eval(s[:-1], s, n)
    with pytest.raises(ValueError, match="zero energy"):
        bss_eval(s, np.zeros_like(s), n)
    with pytest.raises(ValueError, match="rates"):
        bss_eval(Waveform(s, 8000), Waveform(s, 16000), Waveform(n, 8000))


def modulated_tones(n=24000, fs=8000):
    t = np.arange(n) / fs
    x = sum(np.sin(2 * np.pi * 150 * h * t + h) / h for h in range(1, 20))
    return Waveform(x * (1 + 0.5 * np.sin(2 * np.pi * 4 * t)), fs)


def test_stoi_identity_and_sign():
    x = modulated_tones()
    assert stoi(x, x).score == pytest.approx(1.0, abs=1e-9)
    assert stoi(x, Waveform(-x.samples)).score == pytest.approx(1.0, abs=1e-9)


def test_stoi_gain_invariant(rng):
    x = modulated_tones()
    y = Waveform(x.samples + 0.3 * rng.normal(size=len(x)))
    assert stoi(x, y).score == pytest.approx(stoi(x, Waveform(5 * y.samples)).score, abs=1e-6)


def test_stoi_unrelated_noise_is_low(rng):
    x = modulated_tones()
    assert stoi(x, Waveform(rng.normal(size=len(x)))).score < 0.4


def test_stoi_decreases_with_noise(rng):
    x = modulated_tones()
    noise = rng.normal(size=len(x))
    scores = [stoi(x, Waveform(x.samples + a * noise)).score for a in (0.01, 0.05, 0.2, 0.5, 1.0)]
    assert all(a >= b for a, b in zip(scores, scores[1:])), scores


def test_stoi_rejects_silence_and_unknown_rate():
    with pytest.raises(ValueError, match="silent"):
        stoi(Waveform(np.zeros(8000)), Waveform(np.zeros(8000)))
    with pytest.raises(ValueError, match="sample rate"):
        stoi(np.ones(8000), np.ones(8000))


def test_report_layout(tmp_path):
    rows = [EvalRow("a", "babble", 0.0, 1.0, 2.0, 3.0, 0.5), EvalRow("b", "factory", 0.0, 3.0, 4.0, 5.0, 0.7)]
    mean = write_report(tmp_path / "r.csv", rows)
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == ",".join(REPORT_HEADER)
    back = read_report(tmp_path / "r.csv")
    assert [r["id"] for r in back] == ["a", "b", "mean"]
    assert float(back[-1]["sdr"]) == pytest.approx(2.0) == mean.sdr
    assert float(back[-1]["stoi"]) == pytest.approx(0.6)
