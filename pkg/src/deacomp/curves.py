"""Forward/inverse deformation models behind one interface, and the affine
calibration that turns an inverse model into a waveshaping compensator

    g(x) = f_dagger(a0 + a1 x) / alpha,

chosen so that ``f(alpha g(x))`` is affine in ``x`` and agrees with ``f`` at
both ends of the drive window.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .baselines import ParametricFn
from .errors import DomainError, FormatError, OutOfDomain
from .ivp import Direction, SolutionCurve
from .nn import MlpModel
from . import signals

log = logging.getLogger(__name__)

V_MIN = 0.0
V_MAX = 8000.0


class BackendKind(str, enum.Enum):
    DENSE_CURVE = "dense_curve"
    MLP = "mlp"
    PARAMETRIC = "parametric"
    BYPASS = "bypass"


@dataclass(frozen=True)
class DeformationModel:
    """A forward (voltage -> stretch) or inverse (stretch -> voltage) model.

    ``domain`` bounds the independent variable for MLP backends, which have
    no intrinsic domain.  MLP inverses map the signal ``x`` straight to the
    drive ``x_hat``; curve and parametric inverses map stretch to volts.
    """

    kind: BackendKind
    direction: Direction
    impl: object = None
    domain: tuple = (V_MIN, V_MAX)

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.kind is BackendKind.BYPASS and self.direction is not Direction.STRETCH_TO_VOLTAGE:
            raise DomainError("Bypass is only valid as an inverse model")
        if self.kind is BackendKind.DENSE_CURVE:
            if not isinstance(self.impl, SolutionCurve):
                raise DomainError("dense-curve backend needs a SolutionCurve")
            if self.impl.direction is not self.direction:
                raise DomainError(f"curve direction {self.impl.direction.value} does not match "
                                  f"{self.direction.value}")
            object.__setattr__(self, "domain", self.impl.domain)
        if self.kind is BackendKind.PARAMETRIC and self.direction is not Direction.STRETCH_TO_VOLTAGE:
            raise DomainError("parametric families are inverse models")
        if self.kind is BackendKind.MLP and not isinstance(self.impl, MlpModel):
            raise DomainError("mlp backend needs an MlpModel")

    @classmethod
    def dense(cls, curve: SolutionCurve) -> "DeformationModel":
        return cls(BackendKind.DENSE_CURVE, curve.direction, curve)

    @classmethod
    def mlp(cls, model: MlpModel, direction=Direction.VOLTAGE_TO_STRETCH,
            domain=(V_MIN, V_MAX)) -> "DeformationModel":
        return cls(BackendKind.MLP, direction, model, tuple(domain))

    @classmethod
    def parametric(cls, fn: ParametricFn) -> "DeformationModel":
        return cls(BackendKind.PARAMETRIC, Direction.STRETCH_TO_VOLTAGE, fn, (-math.inf, math.inf))

    @classmethod
    def bypass(cls) -> "DeformationModel":
        return cls(BackendKind.BYPASS, Direction.STRETCH_TO_VOLTAGE, None, (-math.inf, math.inf))

    @property
    def label(self) -> str:
        if self.kind is BackendKind.PARAMETRIC:
            return self.impl.family.value.upper()
        if self.kind is BackendKind.MLP:
            return f"MLP({self.impl.config.hidden_activation.value})"
        return {BackendKind.DENSE_CURVE: "PQI", BackendKind.BYPASS: "Bypass"}[self.kind]


class CurveForward:
    """Differentiable view of a voltage-to-stretch curve for E2E training.

    Outside the curve domain the end slopes continue linearly so gradients
    stay informative when a compensator overshoots.
    """

    def __init__(self, curve: SolutionCurve):
        if curve.direction is not Direction.VOLTAGE_TO_STRETCH:
            raise DomainError("CurveForward needs a voltage-to-stretch curve")
        self.curve = curve
        lo, hi = curve.domain
        self._ends = ((lo, float(curve.y[0]), float(curve.derivative(lo))),
                      (hi, float(curve.y[-1]), float(curve.derivative(hi))))

    def value_and_slope(self, V):
        V = np.asarray(V, dtype=np.float64).ravel()
        (lo, ylo, slo), (hi, yhi, shi) = self._ends
        inside = np.clip(V, lo, hi)
        lam = np.asarray(self.curve(inside), dtype=np.float64)
        slope = np.asarray(self.curve.derivative(inside), dtype=np.float64)
        below, above = V < lo, V > hi
        lam = np.where(below, ylo + slo * (V - lo), lam)
        lam = np.where(above, yhi + shi * (V - hi), lam)
        slope = np.where(below, slo, np.where(above, shi, slope))
        return lam, slope


def _check_window(model: DeformationModel, values):
    lo, hi = model.domain
    v = np.atleast_1d(values)
    bad = ~((v >= lo) & (v <= hi))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise OutOfDomain(f"value {v[i]!r} at index {i} outside model domain [{lo}, {hi}]")


def forward_stretch(f: DeformationModel, V):
    """``f(V)`` for a voltage-to-stretch model."""
    if f.direction is not Direction.VOLTAGE_TO_STRETCH:
        raise DomainError("forward_stretch needs a voltage-to-stretch model")
    V = np.asarray(V, dtype=np.float64)
    _check_window(f, V)
    out = np.asarray(f.impl(V), dtype=np.float64)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CompensatorCalibration:
    alpha: float
    a0: float
    a1: float
    x_lo: float
    x_hi: float
    V_floor: float
    V_ceil: float
    lambda_floor: float
    lambda_ceil: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise DomainError(f"{k} must be finite")
        if self.alpha <= 0:
            raise DomainError("alpha must be positive")
        if self.a1 == 0:
            raise DomainError("a1 must be nonzero")
        if not self.x_lo < self.x_hi:
            raise DomainError("x_lo must be below x_hi")
        if not V_MIN <= self.V_floor < self.V_ceil:
            raise DomainError(f"drive window [{self.V_floor}, {self.V_ceil}] must start at >= {V_MIN}")
        if not self.lambda_floor < self.lambda_ceil:
            raise DomainError("lambda_floor must lie below lambda_ceil")

    @property
    def V_dc(self) -> float:
        return 0.5 * (self.V_floor + self.V_ceil)

    @property
    def V_pp(self) -> float:
        return self.V_ceil - self.V_floor

    def target(self, x):
        """Desired stretch ``a0 + a1 x``."""
        return self.a0 + self.a1 * np.asarray(x, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["V_dc"], d["V_pp"] = self.V_dc, self.V_pp
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "CompensatorCalibration":
        d = dict(d)
        V_dc, V_pp = d.pop("V_dc", None), d.pop("V_pp", None)
        try:
            cal = cls(**d)
        except TypeError as exc:
            raise FormatError(f"bad calibration: {exc}") from exc
        if V_dc is not None and not math.isclose(V_dc, cal.V_dc, rel_tol=1e-12, abs_tol=1e-9):
            raise FormatError("V_dc inconsistent with V_floor/V_ceil")
        if V_pp is not None and not math.isclose(V_pp, cal.V_pp, rel_tol=1e-12, abs_tol=1e-9):
            raise FormatError("V_pp inconsistent with V_floor/V_ceil")
        return cal

    @classmethod
    def from_json(cls, text: str) -> "CompensatorCalibration":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad calibration JSON: {exc}") from exc


def calibrate(f: DeformationModel, alpha=1000.0, x_lo=None, x_hi=None,
              V_lo=V_MIN, V_hi=V_MAX) -> CompensatorCalibration:
    """Affine target through ``(x_lo, f(V_lo))`` and ``(x_hi, f(V_hi))``.

    The signal window defaults to ``[V_lo, V_hi] / alpha``.
    """
    if not V_lo < V_hi:
        raise DomainError(f"V_lo={V_lo} must be below V_hi={V_hi}")
    x_lo = V_lo / alpha if x_lo is None else x_lo
    x_hi = V_hi / alpha if x_hi is None else x_hi
    try:
        lam_lo, lam_hi = forward_stretch(f, np.array([V_lo, V_hi]))
    except OutOfDomain as exc:
        raise DomainError(f"calibration window exits the model domain: {exc}") from exc
    a1 = (lam_hi - lam_lo) / (x_hi - x_lo)
    if a1 == 0:
        raise DomainError("degenerate window: f(V_lo) == f(V_hi)")
    a0 = lam_lo - a1 * x_lo
    return CompensatorCalibration(alpha, float(a0), float(a1), x_lo, x_hi, V_lo, V_hi,
                                  float(min(lam_lo, lam_hi)), float(max(lam_lo, lam_hi)))


def compensate(g: DeformationModel, calib: CompensatorCalibration, x):
    """Drive signal ``x_hat = g(x)`` in signal units."""
    if g.direction is not Direction.STRETCH_TO_VOLTAGE:
        raise DomainError("compensate needs an inverse model")
    x = np.asarray(x, dtype=np.float64)
    if g.kind is BackendKind.BYPASS:
        out = x.copy()
    elif g.kind is BackendKind.MLP:
        _check_window(g, x)
        out = np.asarray(g.impl(x), dtype=np.float64)
    else:
        lam = calib.target(x)
        _check_window(g, lam)
        out = np.asarray(g.impl(lam), dtype=np.float64) / calib.alpha
    return float(out) if out.ndim == 0 else out


def compensated_stretch(f_ref: DeformationModel, g: DeformationModel,
                        calib: CompensatorCalibration, x, clamp: bool = False):
    """``f_ref(alpha g(x))``.  With ``clamp`` the drive is clipped into the
    forward model's domain (with a warning) instead of raising."""
    V = calib.alpha * np.asarray(compensate(g, calib, x))
    if clamp:
        lo, hi = f_ref.domain
        n_bad = int(np.count_nonzero((V < lo) | (V > hi)))
        if n_bad:
            log.warning("%d drive samples outside [%g, %g] V clamped", n_bad, lo, hi)
            V = np.clip(V, lo, hi)
    return forward_stretch(f_ref, V)


def probe_grid(calib: CompensatorCalibration, n: int = 1000) -> np.ndarray:
    return np.linspace(calib.x_lo, calib.x_hi, n)


@dataclass(frozen=True)
class EvalSettings:
    n_probes: int = 1000
    sweep_f_start: float = 0.0
    sweep_f_end: float = 12000.0
    sweep_duration: float = 1.0
    fs: float = 48000.0
    V_dc: float = 6000.0
    V_pp: float = 3000.0
    stft_window: int = 1024
    stft_hop: int = 256


def evaluate_compensator(f_ref: DeformationModel, g: DeformationModel,
                         calib: CompensatorCalibration, settings: EvalSettings = EvalSettings(),
                         clamp: bool = True) -> dict:
    """Identity-probe and sweep metrics of one compensator against ``f_ref``."""
    x = probe_grid(calib, settings.n_probes)
    lam_hat = compensated_stretch(f_ref, g, calib, x, clamp=clamp)
    row = {"g": g.label, "log_l1": signals.metric_log_l1(lam_hat, calib.target(x))}
    sweep = signals.sine_sweep(settings.sweep_f_start, settings.sweep_f_end, settings.sweep_duration,
                               settings.fs, settings.V_dc / calib.alpha, settings.V_pp / calib.alpha)
    est = compensated_stretch(f_ref, g, calib, sweep.samples, clamp=clamp)
    ref = calib.target(sweep.samples)
    for norm in (False, True):
        tag = "norm" if norm else "unnorm"
        try:
            row[f"l1_stft_{tag}"] = signals.metric_l1_stft(est, ref, normalized=norm,
                                                           window=settings.stft_window,
                                                           hop=settings.stft_hop)
            row[f"sdr_{tag}"] = signals.metric_sdr(est, ref, normalized=norm)
        except DomainError as exc:  # e.g. a fully clamped, constant response
            log.warning("%s metrics undefined for %s: %s", tag, g.label, exc)
            row[f"l1_stft_{tag}"] = row[f"sdr_{tag}"] = float("nan")
    return row


def tone_thd(f_ref: DeformationModel, g: DeformationModel, calib: CompensatorCalibration,
             f0=1000.0, duration=2.0, fs=48000.0, V_dc=6000.0, V_pp=3000.0) -> float:
    """THD (%) of the simulated stretch for a compensated tone."""
    x = signals.tone(f0, duration, fs, V_dc / calib.alpha, V_pp / calib.alpha)
    lam = compensated_stretch(f_ref, g, calib, x.samples, clamp=True)
    return signals.metric_thd(lam, f0, fs)
