import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deacomp import signals
from deacomp.errors import DomainError, FormatError, ShapeError
from deacomp.signals import SampledSignal


def test_sampled_signal_invariants():
    with pytest.raises(DomainError):
        SampledSignal(0.0, [1.0])
    with pytest.raises(DomainError):
        SampledSignal(48000.0, [1.0, np.inf])
    s = SampledSignal(48000.0, [1, 2, 3])
    assert len(s) == 3 and s.duration == 3 / 48000
    with pytest.raises(ValueError):
        s.samples[0] = 5.0


# --- sweeps -----------------------------------------------------------------

def test_sweep_amplitude_bounds():
    s = signals.sine_sweep(0, 12000, 1.0)
    assert s.samples.max() <= 7500.0 + 1e-9
    assert s.samples.min() >= 4500.0 - 1e-9
    # sampling can miss the exact crest by a hair
    assert s.samples.max() > 7500.0 - 1e-6 and s.samples.min() < 4500.0 + 1e-6
    assert len(s) == 48000


def test_constant_frequency_sweep_is_periodic():
    s = signals.sine_sweep(1000, 1000, 0.1).samples
    period = 48  # fs / 1000
    assert np.allclose(s[period:], s[:-period], atol=1e-9)
    assert np.array_equal(s, signals.tone(1000, 0.1).samples)


def test_sweep_midpoint_frequency_by_zero_crossings():
    fs, dur = 48000.0, 1.0
    s = signals.sine_sweep(2000, 6000, dur, fs, V_dc=0.0, V_pp=2.0).samples
    mid = int(fs * dur / 2)
    seg = s[mid - 480:mid + 480]  # 20 ms window
    idx = np.flatnonzero(np.signbit(seg[:-1]) != np.signbit(seg[1:]))
    # linear interpolation of the crossing instants
    t = idx + seg[idx] / (seg[idx] - seg[idx + 1])
    f_est = (len(t) - 1) / 2 / ((t[-1] - t[0]) / fs)
    assert f_est == pytest.approx(4000.0, rel=2e-3)


def test_sweep_rejects_nyquist():
    with pytest.raises(DomainError):
        signals.sine_sweep(0, 24000, 1.0, 48000)
    with pytest.raises(DomainError):
        signals.sine_sweep(0, 1000, 0.0)


# --- STFT -------------------------------------------------------------------

def test_stft_shapes():
    spec = signals.stft(SampledSignal(48000.0, np.zeros(4096)))
    assert spec.values.shape == (1 + 4096 // 256, 513)
    assert spec.freqs[-1] == 24000.0
    assert spec.times[1] == 256 / 48000


def test_stft_of_zeros():
    assert not np.any(signals.stft(np.zeros(3000)).magnitude)


def test_stft_short_input():
    with pytest.raises(ShapeError):
        signals.stft(np.zeros(100))


def test_stft_parseval_boxcar(rng):
    x = rng.standard_normal(4096)
    spec = signals.stft(x, window=512, hop=512, window_fn="boxcar", center=False)
    # rfft holds each interior bin once; count it twice
    mag2 = spec.magnitude ** 2
    energy = (mag2[:, 0] + mag2[:, -1] + 2 * mag2[:, 1:-1].sum(axis=1)).sum() / 512
    assert energy == pytest.approx(np.dot(x, x), rel=1e-6)


def test_stft_tone_peak_bin():
    # cosine with 24001 samples: the reflect padding continues it smoothly at both ends
    s = SampledSignal(48000.0, np.cos(2 * np.pi * np.arange(24001) / 48))
    spec = signals.stft(s)
    expect = int(np.argmin(np.abs(spec.freqs - 1000.0)))
    assert np.all(np.argmax(spec.magnitude, axis=1) == expect)


# --- metrics ------------------------------------------------------------------

def test_log_l1_identities(rng):
    x = rng.standard_normal(1000)
    assert signals.metric_log_l1(x, x) == -16.0
    assert signals.metric_log_l1(x + 1e-3, x) == pytest.approx(-3.0, abs=1e-12)
    with pytest.raises(ShapeError):
        signals.metric_log_l1(x, x[:-1])


def test_l1_stft_identities(rng):
    x = rng.standard_normal(4096)
    assert signals.metric_l1_stft(x, x) == 0.0
    assert signals.metric_l1_stft(2 * x, x) == pytest.approx(20 * np.log10(2), rel=1e-12)
    assert signals.metric_l1_stft(2 * x, x, normalized=True) == pytest.approx(0.0, abs=1e-9)


def test_sdr_identities(rng):
    x = rng.standard_normal(4096)
    assert signals.metric_sdr(x, x) == 160.0
    noise = rng.standard_normal(4096)
    noise *= np.linalg.norm(x) / np.linalg.norm(noise) / 10
    assert signals.metric_sdr(x + noise, x) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(DomainError):
        signals.metric_sdr(x, np.zeros_like(x))


def test_minmax_normalize_exact(rng):
    x = rng.standard_normal(500) * 1e3 + 7
    y = signals.minmax_normalize(x)
    assert y.min() == 0.0 and y.max() == 1.0
    with pytest.raises(DomainError):
        signals.minmax_normalize(np.ones(5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50).filter(lambda v: max(v) > min(v)))
def test_minmax_normalize_property(v):
    y = signals.minmax_normalize(v)
    assert y.min() == 0.0 and y.max() == 1.0


def test_metrics_deterministic(rng):
    a, b = rng.standard_normal(8192), rng.standard_normal(8192)
    assert signals.metric_l1_stft(a, b) == signals.metric_l1_stft(a.copy(), b.copy())
    assert signals.metric_sdr(a, b) == signals.metric_sdr(a.copy(), b.copy())


def test_thd_pure_tone():
    s = signals.tone(1000, 2.0, V_dc=0.0, V_pp=2.0)
    assert signals.metric_thd(s, 1000) < 0.01


def test_thd_second_harmonic():
    t = np.arange(96000) / 48000
    x = np.sin(2 * np.pi * 1000 * t) + 0.1 * np.sin(2 * np.pi * 2000 * t)
    assert signals.metric_thd(x, 1000, fs=48000) == pytest.approx(10.0, abs=0.1)


def test_thd_errors():
    t = np.arange(4800) / 48000
    with pytest.raises(DomainError):
        signals.metric_thd(np.sin(t), 1000)  # raw array needs fs
    with pytest.raises(DomainError):
        signals.metric_thd(np.sin(2 * np.pi * 10 * t), 10, fs=48000)
    with pytest.raises(DomainError):
        signals.metric_thd(np.sin(2 * np.pi * 1000 * t), 1000, fs=48000, max_harmonics=30)
    with pytest.raises(DomainError):
        signals.metric_thd(np.zeros(4800), 1000, fs=48000)


# --- WAV ----------------------------------------------------------------------

@pytest.mark.parametrize("bits", [16, 24])
def test_wav_roundtrip(tmp_path, rng, bits):
    x = rng.uniform(-1, 1, 4800)
    x[:3] = (-1.0, 1.0, 0.0)
    path = tmp_path / "x.wav"
    signals.wav_write(path, SampledSignal(44100.0, x), bits=bits)
    y = signals.wav_read(path)
    assert y.fs == 44100.0
    assert np.max(np.abs(y.samples - x)) <= 2.0 ** -(bits - 1)


def test_wav_write_clamps(tmp_path):
    path = tmp_path / "c.wav"
    signals.wav_write(path, SampledSignal(8000.0, [-3.0, 3.0]))
    y = signals.wav_read(path).samples
    assert y[0] == -1.0 and y[1] == pytest.approx(1.0, abs=2.0 ** -15)


def test_wav_stereo_first_channel(tmp_path, caplog):
    import wave
    path = tmp_path / "s.wav"
    left = np.array([1000, -2000, 3000], dtype="<i2")
    right = np.array([-5, 5, -5], dtype="<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(48000)
        w.writeframes(np.column_stack([left, right]).tobytes())
    with caplog.at_level(logging.INFO, logger="deacomp.signals"):
        y = signals.wav_read(path)
    assert np.array_equal(y.samples, left / 32768.0)
    assert "first" in caplog.text


def _float_wav(path):
    data = struct.pack("<4f", 0.0, 0.5, -0.5, 0.25)
    fmt = struct.pack("<HHIIHH", 3, 1, 48000, 48000 * 4, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_wav_non_pcm(tmp_path):
    path = tmp_path / "f.wav"
    _float_wav(path)
    with pytest.raises(FormatError):
        signals.wav_read(path)


def test_wav_malformed(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFF\x00\x00")
    with pytest.raises(FormatError):
        signals.wav_read(path)
    with pytest.raises(FormatError):
        signals.wav_write(path, SampledSignal(8000.0, [0.0]), bits=8)
