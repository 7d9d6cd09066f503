"""Closed-form trainable inverse families mapping stretch to volts.

PFF (power), LFF (logarithmic) and HFF (hyperbolic tangent), each with five
parameters ``theta[0..4]`` (``theta[0]`` unused by HFF).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError, FormatError
from .nn import AdamState, TrainSettings, adam_step, decode_array, encode_array, parse_envelope

HFF_CENTER = 1.002
HFF_SCALE = 45.0


class Family(str, enum.Enum):
    PFF = "pff"
    LFF = "lff"
    HFF = "hff"


# Literal initialization rows, parameters in their original slots.
TABLE_INIT = {
    Family.PFF: (0.5, 3e3, 0.0, 1e3, 0.0),
    Family.LFF: (0.3, 1e3, 1.0, 2e3, 0.0),
    Family.HFF: (0.0, 1e4, 0.0, 9e2, 0.0),
}

# Starting points used for training.  The literal rows give a constant PFF
# and a saturated HFF, so the scale entries are reassigned to the slots where
# they produce the described square-root / logarithmic / tanh shapes.
TRAINING_INIT = {
    Family.PFF: (0.5, 1e3, 3e3, 0.0, 0.0),
    Family.LFF: (0.3, 2e3, 1e3, 1.0, 0.0),
    Family.HFF: (0.0, 1e4, 9e2, 0.0, 0.0),
}


def pff_eval(theta, lam):
    t0, t1, t2, t3, t4 = theta
    w = t2 * (1.0 - np.asarray(lam, dtype=float)) + t3
    return t1 * np.abs(w) ** t0 + t4


def lff_eval(theta, lam):
    t0, t1, t2, t3, t4 = theta
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise DomainError("LFF needs lambda_t > 0")
    arg = t2 * (t3 - lam ** t0) + 1.0
    if np.any(arg <= 0):
        raise DomainError("LFF log argument must be positive")
    return t1 * np.log(arg) + t4


def hff_eval(theta, lam):
    _, t1, t2, t3, t4 = theta
    return t1 * np.tanh(t2 / HFF_SCALE * (HFF_CENTER - np.asarray(lam, dtype=float)) + t3) + t4


def pff_grad(theta, lam):
    """Value and d/dtheta (shape (N, 5)).  At the kink ``w = 0`` the
    derivative terms with ``|w|^(theta0-1)`` are set to 0."""
    t0, t1, t2, t3, _ = theta
    lam = np.asarray(lam, dtype=float).ravel()
    s = 1.0 - lam
    w = t2 * s + t3
    aw = np.abs(w)
    p = aw ** t0
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.where(aw > 0, np.log(aw), 0.0)
        dp = np.where(aw > 0, t0 * aw ** (t0 - 1.0) * np.sign(w), 0.0)
    g = np.empty((lam.size, 5))
    g[:, 0] = t1 * p * logw
    g[:, 1] = p
    g[:, 2] = t1 * dp * s
    g[:, 3] = t1 * dp
    g[:, 4] = 1.0
    return t1 * p + theta[4], g


def lff_grad(theta, lam):
    t0, t1, t2, t3, _ = theta
    lam = np.asarray(lam, dtype=float).ravel()
    lp = lam ** t0
    arg = t2 * (t3 - lp) + 1.0
    if np.any(arg <= 0) or np.any(lam <= 0):
        raise DomainError("LFF log argument must be positive")
    g = np.empty((lam.size, 5))
    g[:, 0] = t1 * (-t2 * lp * np.log(lam)) / arg
    g[:, 1] = np.log(arg)
    g[:, 2] = t1 * (t3 - lp) / arg
    g[:, 3] = t1 * t2 / arg
    g[:, 4] = 1.0
    return t1 * np.log(arg) + theta[4], g


def hff_grad(theta, lam):
    _, t1, t2, t3, _ = theta
    lam = np.asarray(lam, dtype=float).ravel()
    d = HFF_CENTER - lam
    th = np.tanh(t2 / HFF_SCALE * d + t3)
    sech2 = 1.0 - th * th
    g = np.empty((lam.size, 5))
    g[:, 0] = 0.0
    g[:, 1] = th
    g[:, 2] = t1 * sech2 * d / HFF_SCALE
    g[:, 3] = t1 * sech2
    g[:, 4] = 1.0
    return t1 * th + theta[4], g


_EVAL = {Family.PFF: pff_eval, Family.LFF: lff_eval, Family.HFF: hff_eval}
_GRAD = {Family.PFF: pff_grad, Family.LFF: lff_grad, Family.HFF: hff_grad}


@dataclass(frozen=True)
class ParametricFn:
    family: Family
    theta: tuple

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        theta = tuple(float(t) for t in self.theta)
        if len(theta) != 5:
            raise DomainError(f"theta needs 5 entries, got {len(theta)}")
        if not all(math.isfinite(t) for t in theta):
            raise DomainError("theta must be finite")
        if self.family is not Family.HFF and theta[0] <= 0:
            raise DomainError(f"{self.family.value} exponent theta0 must be positive")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def initial(cls, family, literal: bool = False) -> "ParametricFn":
        family = Family(family)
        return cls(family, (TABLE_INIT if literal else TRAINING_INIT)[family])

    def __call__(self, lam):
        out = _EVAL[self.family](self.theta, lam)
        return float(out) if np.ndim(out) == 0 else out

    def value_and_grad(self, lam):
        return _GRAD[self.family](self.theta, lam)

    def to_json(self) -> str:
        return json.dumps({
            "format": "deacomp.checkpoint",
            "version": 1,
            "kind": "parametric",
            "config": {"family": self.family.value},
            "params": {"theta": encode_array(np.array(self.theta))},
        })

    @classmethod
    def from_json(cls, blob) -> "ParametricFn":
        doc = parse_envelope(blob, "parametric")
        try:
            family = Family(doc["config"]["family"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad family tag: {exc}") from exc
        theta = decode_array(doc["params"].get("theta", {}))
        if theta.shape != (5,):
            raise FormatError(f"theta must have 5 entries, got shape {theta.shape}")
        return cls(family, tuple(theta))


LFF_MIN_ARG = 1e-6
PFF_MIN_EXPONENT = 1e-3


def project(family: Family, theta: np.ndarray, lam_lo: float, lam_hi: float) -> np.ndarray:
    """Nearest admissible parameters on the stretch window ``[lam_lo, lam_hi]``.

    LFF: ``theta3`` is moved so the log argument stays >= LFF_MIN_ARG on the
    window; PFF/LFF: the exponent stays >= PFF_MIN_EXPONENT.
    """
    t = np.array(theta, dtype=float)
    if family is Family.HFF:
        return t
    t[0] = max(t[0], PFF_MIN_EXPONENT)
    if family is Family.LFF and t[2] != 0.0:
        # argument is monotone in lam, so the window ends bound it
        if t[2] > 0:
            t[3] = max(t[3], lam_hi ** t[0] - (1.0 - LFF_MIN_ARG) / t[2])
        else:
            t[3] = min(t[3], lam_lo ** t[0] - (1.0 - LFF_MIN_ARG) / t[2])
    return t


def train_baseline(fn: ParametricFn, forward_model, calib,
                   settings: TrainSettings = TrainSettings(eta0=1e-5),
                   history: list | None = None, param_scale=None) -> ParametricFn:
    """E2E fit of ``theta`` through a frozen differentiable forward model.

    The loss is ``mean |f(fn(a0 + a1 x)) - (a0 + a1 x)|``.  Adam runs on
    ``theta / param_scale`` (default ``max(|theta_init|, 1)``) so one
    learning rate suits parameters of very different magnitudes.  After each
    update the parameters are projected back onto the family's domain over
    the calibrated stretch window (see ``project``).
    """
    theta0 = np.array(fn.theta)
    scale = np.maximum(np.abs(theta0), 1.0) if param_scale is None else np.asarray(param_scale, float)
    frozen = np.zeros(5, bool)
    frozen[0] = fn.family is Family.HFF
    rng = np.random.default_rng(settings.seed)
    state = AdamState(settings.eta0, interval=settings.decay_interval)
    lam_lo, lam_hi = sorted((calib.a0 + calib.a1 * calib.x_lo, calib.a0 + calib.a1 * calib.x_hi))
    params = {"phi": project(fn.family, theta0, lam_lo, lam_hi) / scale}
    window = []
    for step in range(settings.steps):
        lr = state.learning_rate()
        x = rng.uniform(calib.x_lo, calib.x_hi, size=settings.batch)
        target = calib.a0 + calib.a1 * x
        theta = params["phi"] * scale
        try:
            V, dV = _GRAD[fn.family](theta, target)
        except DomainError as exc:
            raise DivergenceError(f"baseline left its domain at step {step}: {exc}") from exc
        lam, slope = forward_model.value_and_slope(V)
        diff = lam - target
        loss = float(np.mean(np.abs(diff)))
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        dV_up = np.sign(diff) / diff.size * slope
        grad = (dV_up @ dV) * scale
        grad[frozen] = 0.0
        params = adam_step(state, params, {"phi": grad})
        params["phi"] = project(fn.family, params["phi"] * scale, lam_lo, lam_hi) / scale
        if history is not None:
            window.append(loss)
            if len(window) == settings.log_every or step == settings.steps - 1:
                history.append((step, float(np.mean(window)), lr))
                window = []
    return ParametricFn(fn.family, tuple(params["phi"] * scale))
