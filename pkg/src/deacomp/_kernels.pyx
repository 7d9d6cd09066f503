# cython: language_level=3
"""Compiled Dormand-Prince march and quartic evaluation.

Mirrors ``_pyrk`` statement for statement; see that module for semantics.
"""
from libc.math cimport fabs, pow
from libc.stdlib cimport malloc, realloc, free

import numpy as np

from ._tableau import (A21 as _A21, A31 as _A31, A32 as _A32, A41 as _A41, A42 as _A42,
                       A43 as _A43, A51 as _A51, A52 as _A52, A53 as _A53, A54 as _A54,
                       A61 as _A61, A62 as _A62, A63 as _A63, A64 as _A64, A65 as _A65,
                       B1 as _B1, B3 as _B3, B4 as _B4, B5 as _B5, B6 as _B6,
                       C2 as _C2, C3 as _C3, C4 as _C4, C5 as _C5,
                       D1 as _D1, D3 as _D3, D4 as _D4, D5 as _D5, D6 as _D6, D7 as _D7,
                       E1 as _E1, E3 as _E3, E4 as _E4, E5 as _E5, E6 as _E6, E7 as _E7,
                       EXPONENT as _EXPONENT, MAX_FACTOR as _MAX_FACTOR,
                       MIN_FACTOR as _MIN_FACTOR, SAFETY as _SAFETY)
from .errors import StepFailure

cdef double A21 = _A21, A31 = _A31, A32 = _A32, A41 = _A41, A42 = _A42, A43 = _A43
cdef double A51 = _A51, A52 = _A52, A53 = _A53, A54 = _A54
cdef double A61 = _A61, A62 = _A62, A63 = _A63, A64 = _A64, A65 = _A65
cdef double B1 = _B1, B3 = _B3, B4 = _B4, B5 = _B5, B6 = _B6
cdef double C2 = _C2, C3 = _C3, C4 = _C4, C5 = _C5
cdef double D1 = _D1, D3 = _D3, D4 = _D4, D5 = _D5, D6 = _D6, D7 = _D7
cdef double E1 = _E1, E3 = _E3, E4 = _E4, E5 = _E5, E6 = _E6, E7 = _E7
cdef double EXPONENT = _EXPONENT, MAX_FACTOR = _MAX_FACTOR
cdef double MIN_FACTOR = _MIN_FACTOR, SAFETY = _SAFETY

STATUS_END, STATUS_STOP, STATUS_TURN = 0, 1, 2


cdef inline double _rhs(double s, double u, double c, double k) noexcept nogil:
    cdef double lam = 1.0 - s
    return -(4.0 * u / lam + c * (lam * lam * lam - 1.0 / lam) - k)


cdef struct Step:
    double y_next
    double err
    bint accepted
    double h_next
    double f_next
    double y_mid


cdef inline Step _step(double t, double y, double h, double tau_a, double tau_r,
                       double k1, double c, double k) noexcept nogil:
    cdef Step out
    cdef double k2, k3, k4, k5, k6, k7, y_new, err, tol, factor
    k2 = _rhs(t + C2 * h, y + h * (A21 * k1), c, k)
    k3 = _rhs(t + C3 * h, y + h * (A31 * k1 + A32 * k2), c, k)
    k4 = _rhs(t + C4 * h, y + h * (A41 * k1 + A42 * k2 + A43 * k3), c, k)
    k5 = _rhs(t + C5 * h, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4), c, k)
    k6 = _rhs(t + h, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5), c, k)
    y_new = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
    k7 = _rhs(t + h, y_new, c, k)
    err = fabs(h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7))
    out.y_mid = y + h * (D1 * k1 + D3 * k3 + D4 * k4 + D5 * k5 + D6 * k6 + D7 * k7)
    tol = tau_a + tau_r * fabs(y_new)
    if err == 0.0:
        factor = MAX_FACTOR
    else:
        factor = SAFETY * pow(tol / err, EXPONENT)
        if factor > MAX_FACTOR:
            factor = MAX_FACTOR
        elif factor < MIN_FACTOR:
            factor = MIN_FACTOR
    out.y_next = y_new
    out.err = err
    out.accepted = err <= tol
    out.h_next = h * factor
    out.f_next = k7
    return out


cdef class _Buffer:
    cdef double *data
    cdef Py_ssize_t size, cap

    def __cinit__(self, Py_ssize_t cap=1024):
        self.data = <double *> malloc(cap * sizeof(double))
        if self.data == NULL:
            raise MemoryError()
        self.size = 0
        self.cap = cap

    def __dealloc__(self):
        free(self.data)

    cdef int push(self, double value) except -1:
        cdef double *grown
        if self.size == self.cap:
            grown = <double *> realloc(self.data, 2 * self.cap * sizeof(double))
            if grown == NULL:
                raise MemoryError()
            self.data = grown
            self.cap *= 2
        self.data[self.size] = value
        self.size += 1
        return 0

    cdef object to_array(self):
        arr = np.empty(self.size)
        cdef double[::1] view = arr
        cdef Py_ssize_t i
        for i in range(self.size):
            view[i] = self.data[i]
        return arr


def march_dea(double c, double k, double tau_a, double tau_r, double s_end, double u_stop,
              double h0, double h_min, long max_steps=1_000_000):
    cdef double s = 0.0, u = 0.0, h = h0, f
    cdef bint last
    cdef long attempts = 0
    cdef int status = 0
    cdef Step step
    cdef _Buffer ss = _Buffer(), us = _Buffer(), fs = _Buffer(), mids = _Buffer()
    f = _rhs(s, u, c, k)
    ss.push(s); us.push(u); fs.push(f)
    while True:
        attempts += 1
        if attempts > max_steps:
            raise StepFailure(f"exceeded {max_steps} step attempts")
        last = False
        if s + h >= s_end:
            h = s_end - s
            last = True
        step = _step(s, u, h, tau_a, tau_r, f, c, k)
        if step.accepted:
            if last:
                s = s_end
            else:
                s = s + h
            u = step.y_next
            f = step.f_next
            ss.push(s); us.push(u); fs.push(f); mids.push(step.y_mid)
            if last:
                status = 0
                break
            if u >= u_stop:
                status = 1
                break
            if f <= 0.0:
                status = 2
                break
            h = step.h_next
        else:
            h = step.h_next
            if h < h_min:
                raise StepFailure(f"step size {h:.3e} underflowed h_min={h_min:.3e} at s={s}")
    return ss.to_array(), us.to_array(), fs.to_array(), mids.to_array(), status


def march_targets(double c, double k, double tau_a, double tau_r, targets, double h0,
                  double h_min, long max_steps=1_000_000):
    cdef const double[::1] goals = np.ascontiguousarray(targets, dtype=np.float64)
    out_arr = np.empty(goals.shape[0])
    cdef double[::1] out = out_arr
    cdef double s = 0.0, u = 0.0, h = h0, f, goal, h_try
    cdef bint last
    cdef long attempts = 0
    cdef Py_ssize_t j
    cdef Step step
    f = _rhs(s, u, c, k)
    for j in range(goals.shape[0]):
        goal = goals[j]
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
            step = _step(s, u, h_try, tau_a, tau_r, f, c, k)
            if step.accepted:
                if last:
                    s = goal
                else:
                    s = s + h_try
                u = step.y_next
                f = step.f_next
                if not last:
                    h = step.h_next
            else:
                h = step.h_next
                if h < h_min:
                    raise StepFailure(f"step size {h:.3e} underflowed h_min={h_min:.3e}")
        out[j] = u
    return out_arr


def eval_quartic(xn, coeffs, xq):
    cdef const double[::1] x = np.ascontiguousarray(xn, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(coeffs, dtype=np.float64)
    q_arr = np.ascontiguousarray(xq, dtype=np.float64)
    shape = q_arr.shape
    cdef const double[::1] q = q_arr.reshape(-1)
    out_arr = np.empty(q.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t nseg = a.shape[0], i, lo, hi, mid
    cdef double xv, x0, theta
    with nogil:
        for i in range(q.shape[0]):
            xv = q[i]
            # last breakpoint <= xv, clamped to [0, nseg-1]  (searchsorted right - 1)
            lo = 0
            hi = nseg + 1
            while lo < hi:
                mid = (lo + hi) // 2
                if x[mid] <= xv:
                    lo = mid + 1
                else:
                    hi = mid
            lo -= 1
            if lo < 0:
                lo = 0
            elif lo > nseg - 1:
                lo = nseg - 1
            x0 = x[lo]
            theta = (xv - x0) / (x[lo + 1] - x0)
            out[i] = (((a[lo, 4] * theta + a[lo, 3]) * theta + a[lo, 2]) * theta
                      + a[lo, 1]) * theta + a[lo, 0]
    return out_arr.reshape(shape)
