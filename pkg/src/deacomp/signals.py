"""Test signals, STFT, distortion metrics and PCM WAV I/O."""
from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ShapeError

log = logging.getLogger(__name__)

LOG_L1_FLOOR = -16.0
SDR_CAP = 160.0
MAG_FLOOR = 1e-12


@dataclass(frozen=True)
class SampledSignal:
    fs: float
    samples: np.ndarray

    def __post_init__(self):
        if not self.fs > 0:
            raise DomainError(f"sample rate must be positive, got {self.fs}")
        arr = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise DomainError("samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def map(self, fn) -> "SampledSignal":
        return SampledSignal(self.fs, fn(self.samples))


@dataclass(frozen=True)
class Spectrogram:
    times: np.ndarray
    freqs: np.ndarray
    values: np.ndarray  # (frames, bins) complex
    window: int
    hop: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def _samples(x) -> np.ndarray:
    if isinstance(x, SampledSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _pair(est, ref):
    a, b = _samples(est), _samples(ref)
    if a.shape != b.shape:
        raise ShapeError(f"signal lengths differ: {a.size} vs {b.size}")
    return a, b


def sine_sweep(f_start=0.0, f_end=12000.0, duration=1.0, fs=48000.0,
               V_dc=6000.0, V_pp=3000.0) -> SampledSignal:
    """Linear chirp ``V_dc + V_pp/2 sin(phi)`` with phi the integral of a
    linearly moving instantaneous frequency."""
    if max(f_start, f_end) >= fs / 2:
        raise DomainError(f"sweep frequencies must stay below fs/2={fs / 2}")
    if min(f_start, f_end) < 0 or duration <= 0:
        raise DomainError("frequencies must be non-negative and duration positive")
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    phase = 2.0 * np.pi * (f_start * t + 0.5 * (f_end - f_start) / duration * t * t)
    return SampledSignal(fs, V_dc + 0.5 * V_pp * np.sin(phase))


def tone(f0, duration=2.0, fs=48000.0, V_dc=6000.0, V_pp=3000.0) -> SampledSignal:
    return sine_sweep(f0, f0, duration, fs, V_dc, V_pp)


def _window(name: str, n: int) -> np.ndarray:
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)  # periodic
    if name in ("boxcar", "rect"):
        return np.ones(n)
    raise DomainError(f"unknown window {name!r}")


def stft(signal, window=1024, hop=256, window_fn="hann", center=True, fs=None) -> Spectrogram:
    """Frames of ``rfft(win * x[frame])``; ``center`` reflect-pads by window/2."""
    x = _samples(signal)
    if fs is None:
        fs = signal.fs if isinstance(signal, SampledSignal) else 1.0
    if window <= 0 or hop <= 0:
        raise DomainError("window and hop must be positive")
    if x.size < window:
        raise ShapeError(f"signal of {x.size} samples is shorter than the window {window}")
    if center:
        x = np.pad(x, window // 2, mode="reflect")
    n_frames = 1 + (x.size - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _window(window_fn, window)
    values = np.fft.rfft(frames, axis=1)
    times = hop * np.arange(n_frames) / fs
    freqs = np.fft.rfftfreq(window, 1.0 / fs)
    return Spectrogram(times, freqs, values, window, hop)


def minmax_normalize(x) -> np.ndarray:
    a = _samples(x)
    lo, hi = a.min(), a.max()
    if hi == lo:
        raise DomainError("cannot min-max normalize a constant signal")
    out = (a - lo) / (hi - lo)
    out[a == hi] = 1.0
    return out


def metric_log_l1(est, ref) -> float:
    """log10 of the mean absolute difference, floored at -16."""
    a, b = _pair(est, ref)
    m = float(np.mean(np.abs(a - b)))
    return LOG_L1_FLOOR if m <= 10.0 ** LOG_L1_FLOOR else max(math.log10(m), LOG_L1_FLOOR)


def metric_l1_stft(est, ref, normalized=False, window=1024, hop=256) -> float:
    """Mean over time-frequency bins of ``|10 log10(|S_est|^2 / |S_ref|^2)|``."""
    a, b = _pair(est, ref)
    if normalized:
        a, b = minmax_normalize(a), minmax_normalize(b)
    sa = np.maximum(np.abs(stft(a, window, hop).values), MAG_FLOOR)
    sb = np.maximum(np.abs(stft(b, window, hop).values), MAG_FLOOR)
    return float(np.mean(np.abs(20.0 * np.log10(sa / sb))))


def metric_sdr(est, ref, normalized=False) -> float:
    """``10 log10(|ref|^2 / |est - ref|^2)`` in dB, capped at 160."""
    a, b = _pair(est, ref)
    if normalized:
        a, b = minmax_normalize(a), minmax_normalize(b)
    ref_energy = float(np.dot(b, b))
    if ref_energy == 0:
        raise DomainError("reference signal is all zeros")
    d = a - b
    err_energy = float(np.dot(d, d))
    if err_energy <= ref_energy * 10.0 ** (-SDR_CAP / 10.0):
        return SDR_CAP
    return min(10.0 * math.log10(ref_energy / err_energy), SDR_CAP)


def metric_thd(signal, f0, fs=None, max_harmonics=None, half_width=2) -> float:
    """Total harmonic distortion in percent from Hann-windowed FFT band powers
    (``+-half_width`` bins around each harmonic)."""
    x = _samples(signal)
    if fs is None:
        if not isinstance(signal, SampledSignal):
            raise DomainError("fs is required for raw arrays")
        fs = signal.fs
    n = x.size
    spacing = fs / n
    if f0 <= 0 or f0 / spacing < 2 * half_width + 1:
        raise DomainError(f"f0={f0} Hz is not resolvable with {n} samples at fs={fs}")
    k_max = int(math.ceil(fs / 2 / f0)) - 1
    if max_harmonics is not None:
        if max_harmonics * f0 >= fs / 2:
            raise DomainError(f"harmonic {max_harmonics} of {f0} Hz exceeds Nyquist")
        k_max = min(k_max, int(max_harmonics))
    spec = np.abs(np.fft.rfft((x - x.mean()) * _window("hann", n))) ** 2

    def band(k):
        c = int(round(k * f0 / spacing))
        return float(spec[max(c - half_width, 0):c + half_width + 1].sum())

    p1 = band(1)
    if p1 <= 0:
        raise DomainError("no energy at the fundamental")
    harm = sum(band(k) for k in range(2, k_max + 1))
    return 100.0 * math.sqrt(harm / p1)


def wav_read(path) -> SampledSignal:
    """Read 16/24-bit PCM; multichannel input keeps the first channel."""
    try:
        with wave.open(str(path), "rb") as w:
            n_ch, width, fs, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if width not in (2, 3):
        raise FormatError(f"{path}: unsupported sample width {8 * width} bits")
    if len(raw) != n * n_ch * width:
        raise FormatError(f"{path}: truncated data chunk")
    b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, n_ch, width)[:, 0, :]
    if n_ch > 1:
        log.info("%s has %d channels; using the first", path, n_ch)
    if width == 2:
        vals = b.copy().view("<i2").reshape(-1).astype(np.float64) / 32768.0
    else:
        ints = (b[:, 0].astype(np.int32) | (b[:, 1].astype(np.int32) << 8)
                | (b[:, 2].astype(np.int32) << 16))
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        vals = ints.astype(np.float64) / float(1 << 23)
    return SampledSignal(fs, vals)


def wav_write(path, signal: SampledSignal, bits=16) -> None:
    """Write mono PCM, clamping samples to [-1, 1]."""
    if bits not in (16, 24):
        raise FormatError(f"unsupported bit depth {bits}")
    x = np.clip(_samples(signal), -1.0, 1.0)
    full = (1 << (bits - 1))
    ints = np.clip(np.round(x * full), -full, full - 1).astype(np.int32)
    if bits == 16:
        data = ints.astype("<i2").tobytes()
    else:
        u = ints.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3]
        data = np.ascontiguousarray(u).tobytes()
    fs = signal.fs if isinstance(signal, SampledSignal) else 48000
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(bits // 8)
        w.setframerate(int(round(fs)))
        w.writeframes(data)
