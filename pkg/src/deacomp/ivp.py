"""Adaptive RK45 solution of the DEA voltage-stretch IVP with quartic dense output.

One integration pass marches ``s = 1 - lambda_t`` upward from the reference
state with ``u = V**2`` as the dependent variable.  The tabulated nodes, their
derivatives and the per-step midpoint estimates then define two monotone
piecewise-quartic curves: stretch-to-voltage (``f_dagger``) and, by inverting
it segment by segment, voltage-to-stretch (``f``).
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from ._pyrk import STATUS_END, STATUS_STOP, STATUS_TURN, StepResult
from ._pyrk import rk45_step as _rk45_step
from .errors import DomainError, FormatError, OutOfDomain, PullInError
from .physics import MaterialParams, du_dlambda

LAMBDA_FLOOR = 0.3
INITIAL_STEP_FRACTION = 1e-4
MIN_STEP_FRACTION = 1e-14


@dataclass(frozen=True)
class Tolerances:
    """Absolute and relative bounds on the local error estimate."""

    tau_a: float = 1e-16
    tau_r: float = 1e-13

    def __post_init__(self):
        if not (self.tau_a > 0 and self.tau_r > 0):
            raise DomainError(f"tolerances must be positive, got {self}")
        if self.tau_a > self.tau_r:
            raise DomainError(f"tau_a must not exceed tau_r, got {self}")

    @classmethod
    def paired(cls, tau_r: float) -> "Tolerances":
        """``tau_a = 1e-3 * tau_r``, the pairing used for tolerance sweeps."""
        return cls(1e-3 * tau_r, tau_r)


REFERENCE_TOL = Tolerances(1e-16, 1e-13)
PQI_TOL = Tolerances(1e-9, 1e-6)


def rk45_step(rhs, t: float, y: float, h: float, tol: Tolerances, f0: float | None = None,
              h_min: float = 0.0) -> StepResult:
    """Single Dormand-Prince 5(4) step attempt.

    The step is accepted iff ``|y5 - y4| <= tau_a + tau_r*|y5|``; ``h_next``
    follows ``0.9 h (tol/err)^(1/5)`` clamped to ``[0.2h, 5h]``.
    Raises StepFailure when ``h < h_min``.
    """
    return _rk45_step(rhs, t, y, h, tol.tau_a, tol.tau_r, f0=f0, h_min=h_min)


class Direction(str, enum.Enum):
    VOLTAGE_TO_STRETCH = "voltage_to_stretch"
    STRETCH_TO_VOLTAGE = "stretch_to_voltage"


def fit_quartic(y0, y1, d0, d1, ym):
    """Coefficients (in the local coordinate theta in [0, 1]) of the quartic
    matching end values, end slopes ``d0, d1`` (per unit theta) and the
    midpoint value.  Vectorized over segments; returns shape (n, 5)."""
    y0, y1, d0, d1, ym = (np.asarray(v, dtype=float) for v in (y0, y1, d0, d1, ym))
    A = y1 - y0 - d0
    B = d1 - d0
    C = ym - y0 - 0.5 * d0
    a4 = 2.0 * B - 8.0 * A + 16.0 * C
    a3 = B - 2.0 * A - 2.0 * a4
    a2 = A - a3 - a4
    return np.stack([y0, d0, a2, a3, a4], axis=-1)


_QUARTER_NODES = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_QUARTER_INV = np.linalg.inv(np.vander(_QUARTER_NODES, 5, increasing=True))


def quartic_from_values(values):
    """Quartic through values at theta = 0, 1/4, 1/2, 3/4, 1 (shape (..., 5))."""
    return np.asarray(values, dtype=float) @ _QUARTER_INV.T


def _horner(coef, theta):
    return (((coef[..., 4] * theta + coef[..., 3]) * theta + coef[..., 2]) * theta
            + coef[..., 1]) * theta + coef[..., 0]


def _horner_deriv(coef, theta):
    return ((4.0 * coef[..., 4] * theta + 3.0 * coef[..., 3]) * theta
            + 2.0 * coef[..., 2]) * theta + coef[..., 1]


class SolutionCurve:
    """Monotone tabulated solution with piecewise-quartic dense output.

    ``x`` (independent) is strictly increasing; segment ``i`` is a quartic in
    ``theta = (x - x[i]) / (x[i+1] - x[i])`` with coefficients ``coeffs[i]``.
    Instances are immutable.
    """

    __slots__ = ("direction", "x", "y", "coeffs")

    def __init__(self, direction: Direction, x, y, coeffs):
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        coeffs = np.array(coeffs, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise FormatError("curve needs matching 1-D node arrays with >= 2 nodes")
        if coeffs.shape != (x.size - 1, 5):
            raise FormatError(f"expected coefficients of shape {(x.size - 1, 5)}, "
                              f"got {coeffs.shape}")
        if not np.all(np.diff(x) > 0):
            raise FormatError("independent nodes must be strictly increasing")
        for arr in (x, y, coeffs):
            arr.setflags(write=False)
        object.__setattr__(self, "direction", Direction(direction))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "coeffs", coeffs)

    def __setattr__(self, name, value):
        raise AttributeError("SolutionCurve is immutable")

    def __repr__(self):
        lo, hi = self.domain
        return (f"SolutionCurve({self.direction.value}, {self.x.size} nodes, "
                f"domain=[{lo:.6g}, {hi:.6g}])")

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[-1])

    @property
    def nodes(self) -> np.ndarray:
        """(n, 2) array of (independent, dependent) pairs."""
        return np.column_stack([self.x, self.y])

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, xq, backend: str | None = None):
        return eval_dense(self, xq, backend=backend)

    def derivative(self, xq):
        """Slope of the dense output (no domain extension)."""
        xq = np.asarray(xq, dtype=float)
        self._check_domain(xq)
        idx = np.clip(np.searchsorted(self.x, xq, side="right") - 1, 0, self.n_segments - 1)
        width = self.x[idx + 1] - self.x[idx]
        theta = (xq - self.x[idx]) / width
        return _horner_deriv(self.coeffs[idx], theta) / width

    def _check_domain(self, xq):
        lo, hi = self.domain
        bad = ~((xq >= lo) & (xq <= hi))
        if np.any(bad):
            first = int(np.flatnonzero(np.atleast_1d(bad))[0])
            value = np.atleast_1d(xq)[first]
            raise OutOfDomain(f"{value!r} (index {first}) outside curve domain [{lo!r}, {hi!r}]")

    # -- serialization -------------------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps({
            "format": "deacomp.solution_curve",
            "version": 1,
            "direction": self.direction.value,
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "coeffs": self.coeffs.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SolutionCurve":
        try:
            data = json.loads(text)
            if not isinstance(data, dict) or data.get("format") != "deacomp.solution_curve":
                raise FormatError("not a solution-curve document")
            if data.get("version") != 1:
                raise FormatError(f"unsupported curve version {data.get('version')!r}")
            return cls(data["direction"], data["x"], data["y"], data["coeffs"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed curve JSON: {exc}") from exc

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# direction={self.direction.value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["independent", "dependent"])
        for a, b in zip(self.x, self.y):
            writer.writerow([repr(float(a)), repr(float(b))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, direction: Direction | str | None = None) -> "SolutionCurve":
        """Rebuild a curve from node pairs.  Lossy: slopes are estimated by
        three-point differences and segments are Hermite cubics."""
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                if direction is None and "direction=" in line:
                    direction = line.split("direction=", 1)[1].strip()
                continue
            if line.strip():
                rows.append(line)
        try:
            reader = csv.reader(rows)
            header = next(reader)
            if [h.strip() for h in header] != ["independent", "dependent"]:
                raise FormatError(f"unexpected CSV header {header}")
            data = np.array([[float(a), float(b)] for a, b in reader])
        except (StopIteration, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed curve CSV: {exc}") from exc
        if direction is None:
            raise FormatError("curve direction missing from CSV")
        x, y = data[:, 0], data[:, 1]
        if x.size < 2:
            raise FormatError("curve CSV needs at least two rows")
        slopes = np.gradient(y, x, edge_order=2) if x.size > 2 else np.full(2, (y[1] - y[0]) / (x[1] - x[0]))
        w = np.diff(x)
        d0, d1 = slopes[:-1] * w, slopes[1:] * w
        y0, y1 = y[:-1], y[1:]
        a2 = 3 * (y1 - y0) - 2 * d0 - d1
        a3 = 2 * (y0 - y1) + d0 + d1
        coeffs = np.stack([y0, d0, a2, a3, np.zeros_like(y0)], axis=-1)
        return cls(direction, x, y, coeffs)


def eval_dense(curve: SolutionCurve, xq, backend: str | None = None):
    """Evaluate the dense output at ``xq`` (scalar or array).

    Exact at nodes; raises OutOfDomain for any query outside ``curve.domain``.
    """
    arr = np.asarray(xq, dtype=float)
    curve._check_domain(arr)
    kern = _backend.get_kernels(backend)
    out = np.asarray(kern.eval_quartic(curve.x, curve.coeffs, arr.reshape(-1)))
    out[arr.reshape(-1) == curve.x[-1]] = curve.y[-1]
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MarchResult:
    """Raw nodes of one integration pass in ``s = 1 - lambda_t``."""

    s: np.ndarray
    u: np.ndarray
    du_ds: np.ndarray
    u_mid: np.ndarray
    status: int
    c: float
    k: float

    @property
    def lam(self) -> np.ndarray:
        return 1.0 - self.s

    def u_coeffs(self) -> np.ndarray:
        h = np.diff(self.s)
        return fit_quartic(self.u[:-1], self.u[1:], h * self.du_ds[:-1], h * self.du_ds[1:],
                           self.u_mid)


def march(p: MaterialParams, tol: Tolerances, s_end: float, u_stop: float = math.inf,
          backend: str | None = None) -> MarchResult:
    """Integrate ``du/ds`` from the reference state up to ``s_end`` (or until
    ``u >= u_stop``, or a voltage maximum)."""
    if not 0 < s_end < 1:
        raise DomainError(f"s_end must lie in (0, 1), got {s_end}")
    c, k = p.elastic_coefficient, p.force_coefficient
    kern = _backend.get_kernels(backend)
    s, u, f, mids, status = kern.march_dea(c, k, tol.tau_a, tol.tau_r, s_end, u_stop,
                                           INITIAL_STEP_FRACTION * s_end,
                                           MIN_STEP_FRACTION * s_end)
    return MarchResult(s, u, f, mids, int(status), c, k)


def _initial_voltage_slope(res: MarchResult) -> float:
    """dV/dlambda at the reference state for F_r = 0: u ~ 2c s^2 there."""
    return -math.sqrt(2.0 * res.c)


SQRT_RATIO = 1.05  # max growth of u across a refined segment when k > 0
SQRT_INNER_S = 1e-13  # innermost refined node; lambda = 1 - s must stay resolvable


def _refine_sqrt(res: MarchResult, n_nodes: int | None = None) -> MarchResult:
    """Split march segments so that u grows by at most ``SQRT_RATIO`` across
    each piece.

    With a tensile force ``u ~ k s`` near the reference state, so ``V = sqrt(u)``
    has a square-root shape that a quartic in ``s`` cannot follow over a step
    where u grows by a large factor.  The pieces reuse each step's own u-quartic
    (values, slopes, midpoints), so the u-solution is unchanged.
    """
    n = res.s.size if n_nodes is None else n_nodes
    coef = res.u_coeffs()[:n - 1]
    s_out, u_out, d_out, m_out = [res.s[:1]], [res.u[:1]], [res.du_ds[:1]], []
    for i in range(n - 1):
        u0, u1 = res.u[i], res.u[i + 1]
        h = res.s[i + 1] - res.s[i]
        if u0 <= 0.0:
            inner = min(1.0, SQRT_INNER_S / h)
            depth = int(math.ceil(-math.log(inner) / math.log(SQRT_RATIO)))
            theta = SQRT_RATIO ** -np.arange(depth, -1, -1.0)
        elif u1 > SQRT_RATIO * u0:
            m = int(math.ceil(math.log(u1 / u0) / math.log(SQRT_RATIO)))
            # u is close to linear in s over a step; aim for geometric u
            theta = (u0 * (u1 / u0) ** (np.arange(1, m + 1) / m) - u0) / (u1 - u0)
            theta[-1] = 1.0
        else:
            theta = np.array([1.0])
        t_lo = np.concatenate([[0.0], theta[:-1]])
        s_new = res.s[i] + theta * h
        s_new[-1] = res.s[i + 1]
        u_new = _horner(coef[i], theta)
        u_new[-1] = u1
        d_new = _horner_deriv(coef[i], theta) / h
        d_new[-1] = res.du_ds[i + 1]
        s_out.append(s_new)
        u_out.append(u_new)
        d_out.append(d_new)
        m_out.append(_horner(coef[i], 0.5 * (t_lo + theta)))
    return MarchResult(np.concatenate(s_out), np.concatenate(u_out), np.concatenate(d_out),
                       np.concatenate(m_out), res.status, res.c, res.k)


def _stretch_to_voltage(res: MarchResult, n_nodes: int | None = None) -> SolutionCurve:
    n = res.s.size if n_nodes is None else n_nodes
    s, u, f, mids = res.s[:n], res.u[:n], res.du_ds[:n], res.u_mid[:n - 1]
    V = np.sqrt(np.maximum(u, 0.0))
    x = (1.0 - s)[::-1]
    y = V[::-1]
    w = np.diff(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        dV = -f / (2.0 * V)  # dV/dlambda
    regular_start = res.k == 0.0
    # V ~ sqrt(s) at the reference state when k > 0; that segment is refit below
    dV[0] = _initial_voltage_slope(res) if regular_start else 0.0
    dVa = dV[::-1]
    coeffs = fit_quartic(y[:-1], y[1:], w * dVa[:-1], w * dVa[1:],
                         np.sqrt(np.maximum(mids[::-1], 0.0)))
    if not regular_start:
        # V ~ sqrt(s) near the reference state: interpolate values instead
        ucoef = res.u_coeffs()[0]
        theta_s = 1.0 - _QUARTER_NODES
        coeffs[-1] = quartic_from_values(np.sqrt(np.maximum(_horner(ucoef, theta_s), 0.0)))
        coeffs[-1, 0] = y[-2]
    return SolutionCurve(Direction.STRETCH_TO_VOLTAGE, x, y, coeffs)


def _invert_segments(s2v: SolutionCurve, targets: np.ndarray) -> np.ndarray:
    """lambda at which each reversed segment of ``s2v`` reaches ``targets``."""
    coef = s2v.coeffs[::-1]
    lo = np.zeros_like(targets)
    hi = np.ones_like(targets)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        right = _horner(coef, mid) > targets  # V decreases with theta
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
    theta = 0.5 * (lo + hi)
    x0 = s2v.x[:-1][::-1]
    width = np.diff(s2v.x)[::-1]
    return x0 + theta * width


def _voltage_to_stretch(res: MarchResult, s2v: SolutionCurve) -> SolutionCurve:
    n = s2v.x.size
    s, u, f = res.s[:n], res.u[:n], res.du_ds[:n]
    V = np.sqrt(np.maximum(u, 0.0))
    lam = 1.0 - s
    w = np.diff(V)
    with np.errstate(divide="ignore", invalid="ignore"):
        dlam = -2.0 * V / f  # dlambda/dV
    if res.k == 0.0:
        dlam[0] = 1.0 / _initial_voltage_slope(res)
    lam_mid = _invert_segments(s2v, 0.5 * (V[:-1] + V[1:]))
    coeffs = fit_quartic(lam[:-1], lam[1:], w * dlam[:-1], w * dlam[1:], lam_mid)
    return SolutionCurve(Direction.VOLTAGE_TO_STRETCH, V, lam, coeffs)


@dataclass(frozen=True)
class CurvePair:
    """Voltage-to-stretch ``forward`` and stretch-to-voltage ``inverse`` curves
    from a single integration pass."""

    forward: SolutionCurve
    inverse: SolutionCurve
    params: MaterialParams
    tol: Tolerances


def _raise_for_turn(res: MarchResult, what: str):
    lam = 1.0 - res.s[-1]
    raise PullInError(f"dV/dlambda changed sign near lambda={lam:.6f}, "
                      f"V={math.sqrt(res.u[-1]):.6g} V before {what}")


def solve_curves(p: MaterialParams, tol: Tolerances, V_max: float,
                 backend: str | None = None, allow_partial: bool = False) -> CurvePair:
    """Integrate once until ``V >= V_max`` and build both curves.

    With ``allow_partial`` a path that turns over or hits the stretch floor
    first is returned up to its last monotone node instead of raising.
    """
    if not V_max > 0:
        raise DomainError(f"V_max must be positive, got {V_max}")
    res = march(p, tol, 1.0 - LAMBDA_FLOOR, V_max * V_max, backend=backend)
    n = None
    if res.status == STATUS_TURN:
        if not allow_partial:
            _raise_for_turn(res, f"reaching V_max={V_max}")
        n = res.s.size - 1
    elif res.status != STATUS_STOP and not allow_partial:
        raise PullInError(f"V_max={V_max} not reached above the stretch floor {LAMBDA_FLOOR}")
    if res.k > 0.0:
        res, n = _refine_sqrt(res, n), None
    inverse = _stretch_to_voltage(res, n)
    forward = _voltage_to_stretch(res, inverse)
    return CurvePair(forward, inverse, p, tol)


def solve_voltage_to_stretch(p: MaterialParams, tol: Tolerances, V_max: float,
                             backend: str | None = None) -> SolutionCurve:
    """``f``: stretch as a function of voltage on (at least) ``[0, V_max]``."""
    return solve_curves(p, tol, V_max, backend=backend).forward


def solve_stretch_to_voltage(p: MaterialParams, tol: Tolerances, lambda_min: float,
                             backend: str | None = None) -> SolutionCurve:
    """``f_dagger``: voltage as a function of stretch on ``[lambda_min, 1]``."""
    if not LAMBDA_FLOOR <= lambda_min < 1:
        raise DomainError(f"lambda_min must lie in [{LAMBDA_FLOOR}, 1), got {lambda_min}")
    res = march(p, tol, 1.0 - lambda_min, backend=backend)
    if res.status == STATUS_TURN:
        _raise_for_turn(res, f"reaching lambda_min={lambda_min}")
    if res.k > 0.0:
        res = _refine_sqrt(res)
    return _stretch_to_voltage(res)


@dataclass(frozen=True)
class PullInLimit:
    lambda_crit: float
    V_crit: float
    found: bool  # False: no voltage maximum above the stretch floor


def pull_in_limit(p: MaterialParams, tol: Tolerances = REFERENCE_TOL,
                  backend: str | None = None) -> PullInLimit:
    """Locate the first voltage maximum along the equilibrium path.

    Returns the stretch floor and the voltage there when the path stays
    monotone down to ``LAMBDA_FLOOR``.
    """
    res = march(p, tol, 1.0 - LAMBDA_FLOOR, backend=backend)
    if res.status != STATUS_TURN:
        return PullInLimit(LAMBDA_FLOOR, math.sqrt(res.u[-1]), False)
    coef = res.u_coeffs()[-1]
    s0, h = res.s[-2], res.s[-1] - res.s[-2]
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        u_mid = float(_horner(coef, mid))
        if du_dlambda(u_mid, 1.0 - (s0 + mid * h), res.c, res.k) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-17:
            break
    theta = 0.5 * (lo + hi)
    lam = 1.0 - (s0 + theta * h)
    return PullInLimit(lam, math.sqrt(float(_horner(coef, theta))), True)


def round_trip_error(pair: CurvePair, V_max: float, n_probes: int = 1000) -> float:
    """max |f_dagger(f(V)) - V| over a uniform probe of ``[0, V_max]``."""
    V = np.linspace(0.0, V_max, n_probes)
    lam = pair.forward(V)
    return float(np.max(np.abs(pair.inverse(lam) - V)))


def solve_at_stretches(p: MaterialParams, tol: Tolerances, lambdas,
                       backend: str | None = None) -> np.ndarray:
    """Voltages at the given stretches by marching onto each one in turn
    (no dense output); this is the plain RK45 evaluation route."""
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas > 1) or np.any(lambdas < LAMBDA_FLOOR):
        raise OutOfDomain(f"stretches must lie in [{LAMBDA_FLOOR}, 1]")
    s = 1.0 - lambdas
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    span = max(float(s_sorted[-1]), 1e-12)
    kern = _backend.get_kernels(backend)
    u_sorted = kern.march_targets(p.elastic_coefficient, p.force_coefficient, tol.tau_a,
                                  tol.tau_r, s_sorted, INITIAL_STEP_FRACTION * span,
                                  MIN_STEP_FRACTION * span)
    out = np.empty_like(s)
    out[order] = np.sqrt(np.maximum(u_sorted, 0.0))
    return out


def identify_shear_modulus(p: MaterialParams, V: float, lambda_target: float,
                           tol: Tolerances = REFERENCE_TOL) -> float:
    """Shear modulus for which ``f(V) = lambda_target``, other constants fixed.

    With ``F_r = 0`` the stretch depends on ``V / sqrt(mu)`` only, so one
    solve and a rescale suffice.
    """
    if p.F_r != 0:
        raise DomainError("identification by rescaling requires F_r = 0")
    inverse = solve_stretch_to_voltage(p, tol, min(lambda_target, 0.99) - 0.01)
    v_ref = float(inverse(lambda_target))
    return p.mu * (V / v_ref) ** 2
