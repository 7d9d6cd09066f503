"""Compiled vs pure-Python kernels.

Times the adaptive march (RK45 onto target stretches), building the dense
curve pair, and evaluating the dense quartics, for both backends, and checks
that both backends return identical numbers.

    python3 benchmarks/bench_kernels.py [--reps N] [--n 1000] [--csv out.csv]
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from deacomp import _backend, ivp, physics


def timed(fn, reps):
    fn()
    t = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        t[i] = time.perf_counter() - t0
    return float(np.median(t))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--reps", type=int, default=50, help="repetitions for the compiled backend")
    ap.add_argument("--python-reps", type=int, default=5)
    ap.add_argument("--n", type=int, default=1000, help="evaluation points")
    ap.add_argument("--tau-r", type=float, nargs="+", default=[1e-6, 1e-9, 1e-13])
    ap.add_argument("--csv")
    args = ap.parse_args(argv)

    if not _backend.COMPILED:
        print("compiled extension not built; only the Python backend is available", file=sys.stderr)
    backends = ["compiled", "python"] if _backend.COMPILED else ["python"]
    p = physics.reference_params()
    V_max = 8000.0
    rows = []
    for tau_r in args.tau_r:
        tol = ivp.Tolerances.paired(tau_r)
        pair = ivp.solve_curves(p, tol, V_max)
        lam = np.linspace(float(pair.forward(V_max)), 1.0, args.n)
        V = np.linspace(0.0, V_max, args.n)
        results = {}
        for b in backends:
            reps = args.reps if b == "compiled" else args.python_reps
            jobs = {
                "march_targets": lambda: ivp.solve_at_stretches(p, tol, lam, backend=b),
                "solve_curves": lambda: ivp.solve_curves(p, tol, V_max, backend=b),
                "eval_dense": lambda: pair.forward(V, backend=b),
            }
            for name, fn in jobs.items():
                rows.append((name, b, tau_r, args.n, reps, timed(fn, reps)))
                results[(name, b)] = fn()
        if len(backends) == 2:
            for name in ("march_targets", "eval_dense"):
                a, c = results[(name, "compiled")], results[(name, "python")]
                if not np.array_equal(a, c):
                    print(f"WARNING {name} differs between backends at tau_r={tau_r}: "
                          f"max {np.max(np.abs(a - c)):.3e}", file=sys.stderr)

    by = {(r[0], r[1], r[2]): r[5] for r in rows}
    print(f"{'kernel':<14} {'tau_r':>8} {'compiled ms':>12} {'python ms':>12} {'speed-up':>9}")
    for name in ("march_targets", "solve_curves", "eval_dense"):
        for tau_r in args.tau_r:
            py = by[(name, "python", tau_r)]
            if "compiled" in backends:
                cc = by[(name, "compiled", tau_r)]
                print(f"{name:<14} {tau_r:>8.0e} {cc * 1e3:>12.4f} {py * 1e3:>12.4f} {py / cc:>8.1f}x")
            else:
                print(f"{name:<14} {tau_r:>8.0e} {'-':>12} {py * 1e3:>12.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "backend", "tau_r", "n", "reps", "median_s"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
