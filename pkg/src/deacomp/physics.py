"""Material constants and governing equations of the ideal equi-biaxial DEA.

All quantities are SI. The voltage-stretch relation is a scalar ODE in the
thickness stretch ``lambda_t``; the solver uses the ``u = V**2`` form, which is
regular at the reference state ``(V, lambda_t) = (0, 1)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

from .errors import DomainError

# Shear modulus (Pa) that reproduces the measured calibration slope
# a1 = -0.0341325 over 0..8 kV, i.e. f(8 kV) = 0.72694, with the other
# default constants.  See ``ivp.identify_shear_modulus``.
REFERENCE_SHEAR_MODULUS = 10876.636651944615

PARAM_KEYS = ("T", "R", "Y", "mu", "eps0", "epsr", "F_r")


@dataclass(frozen=True)
class MaterialParams:
    """Geometry and constitutive constants of the actuator."""

    T: float = 1e-3
    R: float = 1e-2
    Y: float = 220e3
    mu: float = 220e3 / 3
    eps0: float = 8.85e-12
    epsr: float = 3.5
    F_r: float = 0.0

    def __post_init__(self):
        for key in PARAM_KEYS:
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise DomainError(f"{key} must be a finite number, got {value!r}")
        for key in ("T", "R", "Y", "mu", "eps0"):
            if getattr(self, key) <= 0:
                raise DomainError(f"{key} must be positive, got {getattr(self, key)}")
        if self.epsr < 1:
            raise DomainError(f"epsr must be >= 1, got {self.epsr}")
        if self.F_r < 0:
            raise DomainError(f"F_r must be >= 0, got {self.F_r}")

    @property
    def eps(self) -> float:
        """Permittivity eps0 * epsr."""
        return self.eps0 * self.epsr

    @property
    def elastic_coefficient(self) -> float:
        """``2 mu T^2 / eps``: coefficient of the elastic term in du/dlambda."""
        return 2.0 * self.mu * self.T * self.T / self.eps

    @property
    def force_coefficient(self) -> float:
        """``2 F_r T / (pi R^2 eps)``: the tensile-force term in du/dlambda."""
        return 2.0 * self.F_r * self.T / (math.pi * self.R * self.R * self.eps)

    def replace(self, **changes) -> "MaterialParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in PARAM_KEYS}

    @classmethod
    def from_dict(cls, data: dict) -> "MaterialParams":
        unknown = set(data) - set(PARAM_KEYS)
        if unknown:
            raise DomainError(f"unknown material keys: {sorted(unknown)}")
        values = {key: float(data[key]) for key in PARAM_KEYS if key in data and key != "mu"}
        if "mu" in data and data["mu"] is not None:
            values["mu"] = float(data["mu"])
        else:
            values["mu"] = values.get("Y", cls.Y) / 3
        return cls(**values)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MaterialParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ActuatorState:
    V: float
    lambda_t: float

    def __post_init__(self):
        if not self.V >= 0:
            raise DomainError(f"V must be >= 0, got {self.V}")
        if not 0 < self.lambda_t <= 1:
            raise DomainError(f"lambda_t must lie in (0, 1], got {self.lambda_t}")


def default_params() -> MaterialParams:
    """Nominal VHB 4910 constants with the incompressible rule mu = Y/3."""
    return MaterialParams()


def reference_params() -> MaterialParams:
    """Nominal constants with the shear modulus identified from the measured
    calibration slope; used for all evaluation and compensation runs."""
    return MaterialParams(mu=REFERENCE_SHEAR_MODULUS)


def _check_stretch(lambda_t: float) -> None:
    if not lambda_t > 0:
        raise DomainError(f"lambda_t must be positive, got {lambda_t}")


def ode_dV_dlambda(state: ActuatorState, p: MaterialParams) -> float:
    """dV/dlambda_t along the equilibrium path.

    ``2V/l + (mu T^2/(eps V)) (l^3 - 1/l) - F_r T / (pi R^2 eps V)``.
    Singular at V = 0.
    """
    V, lam = state.V, state.lambda_t
    _check_stretch(lam)
    if V == 0:
        raise DomainError("dV/dlambda is singular at V = 0; use ode_du_dlambda")
    elastic = p.mu * p.T * p.T / (p.eps * V) * (lam * lam * lam - 1.0 / lam)
    force = p.F_r * p.T / (math.pi * p.R * p.R) / (p.eps * V)
    return 2.0 * V / lam + elastic - force


def du_dlambda(u: float, lam: float, c: float, k: float) -> float:
    """Regularized right-hand side with precomputed coefficients.

    ``c = 2 mu T^2 / eps`` and ``k = 2 F_r T / (pi R^2 eps)``.  The compiled
    kernel evaluates exactly this expression, term for term.
    """
    return 4.0 * u / lam + c * (lam * lam * lam - 1.0 / lam) - k


def ode_du_dlambda(u: float, lambda_t: float, p: MaterialParams) -> float:
    """d(V^2)/dlambda_t; finite at u = 0 and equal to 2V dV/dlambda for V > 0."""
    _check_stretch(lambda_t)
    if u < 0:
        raise DomainError(f"u = V^2 must be >= 0, got {u}")
    return du_dlambda(u, lambda_t, p.elastic_coefficient, p.force_coefficient)


def charge(V: float, lambda_t: float, p: MaterialParams) -> float:
    """Electrode charge Q = V pi R^2 eps / (T lambda_t^2)."""
    _check_stretch(lambda_t)
    return V * math.pi * p.R * p.R * p.eps / (p.T * lambda_t * lambda_t)


def free_energy_density(lambda_t: float, p: MaterialParams) -> float:
    """Neo-Hookean energy density (mu/2)(l^2 + l^-2 - 2) under the
    incompressible, no-buckling reduction."""
    _check_stretch(lambda_t)
    return 0.5 * p.mu * (lambda_t * lambda_t + 1.0 / (lambda_t * lambda_t) - 2.0)
