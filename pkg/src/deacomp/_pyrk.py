"""Pure-Python kernels: Dormand-Prince stepping and quartic evaluation.

This module is the reference implementation; ``_kernels.pyx`` mirrors it
operation for operation so both backends produce the same floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._tableau import (A21, A31, A32, A41, A42, A43, A51, A52, A53, A54, A61, A62, A63,
                       A64, A65, B1, B3, B4, B5, B6, C2, C3, C4, C5, D1, D3, D4, D5, D6,
                       D7, E1, E3, E4, E5, E6, E7, EXPONENT, MAX_FACTOR, MIN_FACTOR, SAFETY)
from .errors import StepFailure
from .physics import du_dlambda

STATUS_END, STATUS_STOP, STATUS_TURN = 0, 1, 2


@dataclass(frozen=True)
class StepResult:
    y_next: float
    error_estimate: float
    accepted: bool
    h_next: float
    f_next: float  # rhs at (t + h, y_next); reused as the first stage of the next step
    y_mid: float  # dense-output estimate at t + h/2


def rk45_step(rhs: Callable[[float, float], float], t: float, y: float, h: float,
              tau_a: float, tau_r: float, f0: float | None = None,
              h_min: float = 0.0) -> StepResult:
    """One Dormand-Prince 5(4) attempt of size ``h`` from ``(t, y)``."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    if h < h_min:
        raise StepFailure(f"step size {h:.3e} fell below h_min={h_min:.3e}")
    k1 = rhs(t, y) if f0 is None else f0
    k2 = rhs(t + C2 * h, y + h * (A21 * k1))
    k3 = rhs(t + C3 * h, y + h * (A31 * k1 + A32 * k2))
    k4 = rhs(t + C4 * h, y + h * (A41 * k1 + A42 * k2 + A43 * k3))
    k5 = rhs(t + C5 * h, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4))
    k6 = rhs(t + h, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5))
    y_new = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
    k7 = rhs(t + h, y_new)
    err = abs(h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7))
    y_mid = y + h * (D1 * k1 + D3 * k3 + D4 * k4 + D5 * k5 + D6 * k6 + D7 * k7)
    tol = tau_a + tau_r * abs(y_new)
    if err == 0.0:
        factor = MAX_FACTOR
    else:
        factor = SAFETY * (tol / err) ** EXPONENT
        if factor > MAX_FACTOR:
            factor = MAX_FACTOR
        elif factor < MIN_FACTOR:
            factor = MIN_FACTOR
    return StepResult(y_new, err, err <= tol, h * factor, k7, y_mid)


def march_dea(c, k, tau_a, tau_r, s_end, u_stop, h0, h_min, max_steps=1_000_000):
    """Integrate ``du/ds = -du/dlambda(u, 1 - s)`` from ``(s, u) = (0, 0)``.

    Stops at ``s_end``, once ``u >= u_stop``, or at the first node where
    ``du/ds <= 0`` (voltage maximum).  Returns node arrays ``s, u, du/ds``,
    per-segment midpoint values and the stop status.
    """

    def rhs(s, u):
        return -du_dlambda(u, 1.0 - s, c, k)

    s, u = 0.0, 0.0
    f = rhs(s, u)
    ss, us, fs, mids = [s], [u], [f], []
    h = h0
    status = STATUS_END
    attempts = 0
    while True:
        attempts += 1
        if attempts > max_steps:
            raise StepFailure(f"exceeded {max_steps} step attempts")
        last = False
        if s + h >= s_end:
            h = s_end - s
            last = True
        step = rk45_step(rhs, s, u, h, tau_a, tau_r, f0=f)
        if step.accepted:
            s = s_end if last else s + h
            u = step.y_next
            f = step.f_next
            ss.append(s)
            us.append(u)
            fs.append(f)
            mids.append(step.y_mid)
            if last:
                status = STATUS_END
                break
            if u >= u_stop:
                status = STATUS_STOP
                break
            if f <= 0.0:
                status = STATUS_TURN
                break
            h = step.h_next
        else:
            h = step.h_next
            if h < h_min:
                raise StepFailure(f"step size {h:.3e} underflowed h_min={h_min:.3e} at s={s}")
    return (np.array(ss), np.array(us), np.array(fs), np.array(mids), status)


def march_targets(c, k, tau_a, tau_r, targets, h0, h_min, max_steps=1_000_000):
    """Integrate as ``march_dea`` but land a step exactly on every target ``s``
    (sorted ascending, > 0) and return ``u`` there.  No dense output is used."""

    def rhs(s, u):
        return -du_dlambda(u, 1.0 - s, c, k)

    targets = np.asarray(targets, dtype=float)
    out = np.empty(targets.shape[0])
    s, u = 0.0, 0.0
    f = rhs(s, u)
    h = h0
    attempts = 0
    for j in range(targets.shape[0]):
        goal = targets[j]
        while s < goal:
            attempts += 1
            if attempts > max_steps:
                raise StepFailure(f"exceeded {max_steps} step attempts")
            last = False
            if s + h >= goal:
                h_try = goal - s
                last = True
            else:
                h_try = h
            step = rk45_step(rhs, s, u, h_try, tau_a, tau_r, f0=f)
            if step.accepted:
                s = goal if last else s + h_try
                u = step.y_next
                f = step.f_next
                if not last:
                    h = step.h_next
            else:
                h = step.h_next
                if h < h_min:
                    raise StepFailure(f"step size {h:.3e} underflowed h_min={h_min:.3e}")
        out[j] = u
    return out


def eval_quartic(xn, coeffs, xq):
    """Evaluate piecewise quartics (local coordinate in [0, 1]) at ``xq``.

    ``xn`` are the segment breakpoints; points at or beyond the last breakpoint
    use the last segment.  Domain checks are the caller's job.
    """
    xq = np.asarray(xq, dtype=float)
    nseg = coeffs.shape[0]
    idx = np.searchsorted(xn, xq, side="right") - 1
    np.clip(idx, 0, nseg - 1, out=idx)
    x0 = xn[idx]
    theta = (xq - x0) / (xn[idx + 1] - x0)
    a = coeffs[idx]
    return (((a[..., 4] * theta + a[..., 3]) * theta + a[..., 2]) * theta + a[..., 1]) * theta \
        + a[..., 0]
