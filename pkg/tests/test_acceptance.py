"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints at the end
of the run (see ``conftest.py``).  Criteria that are known not to hold are
marked ``xfail(strict=True)``: the check itself runs at the stated tolerance
and must keep failing.

Criterion 6 trains desk-scale models for three seeds (roughly 15 minutes per
seed on one core).  Set ``DEACOMP_SKIP_TRAINING=1`` to skip it.
"""
import math
import os
import time

import numpy as np
import pytest

from deacomp import _backend, baselines, cli, curves, ivp, nn, physics, signals
from deacomp.curves import DeformationModel

from gradcheck import baseline_worst_error, mlp_worst_error
from oracles import rk4_stretch_at_voltage

RESULTS: dict[int, str] = {}


def report(n, ok, detail):
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def probes(n=1000, V_max=8000.0):
    return np.linspace(0.0, V_max, n)


# 1 ---------------------------------------------------------------------------------------

def test_criterion_1_solver_precision(defaults):
    t0 = time.perf_counter()
    pair = ivp.solve_curves(defaults, ivp.Tolerances(1e-16, 1e-13), 8000.0)
    V = probes()
    err = float(np.max(np.abs(pair.inverse(pair.forward(V)) - V)) / 8000.0)
    dt = time.perf_counter() - t0
    ok = err < 1e-10 and dt < 5.0
    assert report(1, ok, f"max round-trip error {err:.2e} (rel. to 8 kV) < 1e-10; {dt:.2f} s < 5 s")


# 2 ---------------------------------------------------------------------------------------

def test_criterion_2_oracle(defaults):
    t0 = time.perf_counter()
    pair = ivp.solve_curves(defaults, ivp.REFERENCE_TOL, 8000.0)
    worst = 0.0
    for V in (1000.0, 2000.0, 4000.0, 8000.0):
        lam = float(pair.forward(V))
        ref = rk4_stretch_at_voltage(defaults, V, h=1e-6)
        worst = max(worst, abs(lam - ref) / abs(ref))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 60.0
    assert report(2, ok, f"max relative deviation from RK4 (h=1e-6) {worst:.2e} < 1e-9; {dt:.1f} s")


# 3 ---------------------------------------------------------------------------------------

def test_criterion_3_tolerance_monotonicity(defaults):
    V = probes()
    maxima = []
    for tau_r in (1e-5, 1e-8, 1e-11):
        pair = ivp.solve_curves(defaults, ivp.Tolerances.paired(tau_r), 8000.0)
        maxima.append(float(np.max(np.abs(pair.inverse(pair.forward(V)) - V))))
    ok = maxima[0] > maxima[1] > maxima[2]
    assert report(3, ok, "round-trip maxima " + " > ".join(f"{m:.2e}" for m in maxima) + " V")


# 4 ---------------------------------------------------------------------------------------

def _calibration(p):
    pair = ivp.solve_curves(p, ivp.REFERENCE_TOL, 8000.0)
    cal = curves.calibrate(DeformationModel.dense(pair.forward), 1000.0)
    return cal, float(pair.forward(8000.0))


def test_criterion_4_reports_lambda(defaults):
    """The deviation report itself: lambda(8 kV) is computed and finite."""
    cal, lam8 = _calibration(defaults)
    assert 0 < lam8 < 1 and cal.a1 == pytest.approx((lam8 - 1.0) / 8.0, rel=1e-12)


@pytest.mark.xfail(strict=True, reason="mu = Y/3 gives a much stiffer film than the calibration slope implies")
def test_criterion_4_calibration_constants(defaults, reference):
    cal, lam8 = _calibration(defaults)
    ok = abs(cal.a0 - 0.9999924) <= 1e-3 and abs(cal.a1 - (-0.0341325)) <= 1e-3
    ident, lam8_ident = _calibration(reference)
    report(4, ok, f"mu=Y/3: a0={cal.a0:.7f}, a1={cal.a1:.7f}, lambda(8 kV)={lam8:.6f} "
                  f"(target a1=-0.0341325+-1e-3); identified mu={reference.mu:.1f} Pa gives "
                  f"a1={ident.a1:.7f}, lambda(8 kV)={lam8_ident:.6f}")
    assert ok


# 5 ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def table_rows():
    t0 = time.perf_counter()
    session = cli.Session(cli.RunConfig())
    rows = {
        "bypass": session.evaluate(DeformationModel.bypass()),
        "pqi": session.evaluate(session.pqi_inverse(1e-6)),
    }
    return rows, time.perf_counter() - t0


@pytest.mark.xfail(strict=True, reason="Bypass log l1 and SDR and PQI log l1 miss the reference values")
def test_criterion_5_deterministic_rows(table_rows):
    rows, dt = table_rows
    b, q = rows["bypass"], rows["pqi"]
    checks = {
        "Bypass logl1": (b["log_l1"], -1.7431, 0.1),
        "Bypass SDR": (b["sdr_unnorm"], 74.91, 2.0),
        "PQI(1e-6) logl1": (q["log_l1"], -5.5426, 0.3),
    }
    parts, ok = [], dt < 120.0
    for name, (got, want, tol) in checks.items():
        hit = abs(got - want) <= tol
        ok &= hit
        parts.append(f"{name} {got:.4f} vs {want}+-{tol} {'ok' if hit else 'MISS'}")
    report(5, ok, "; ".join(parts) + f"; {dt:.1f} s")
    assert ok


def test_criterion_5_runtime_and_ordering(table_rows):
    """Parts of criterion 5 that do hold: runtime and PQI far better than Bypass."""
    rows, dt = table_rows
    assert dt < 120.0
    assert rows["pqi"]["log_l1"] < rows["bypass"]["log_l1"] - 3


# 6 ---------------------------------------------------------------------------------------

SEEDS = (0, 1, 2)
FAMILIES = ("hff", "lff", "pff")


def _train_seed(seed):
    t0 = time.perf_counter()
    session = cli.Session(cli.RunConfig(seed=seed))
    f = session.train_f(seed=seed)
    g = session.train_g(f, seed=seed)
    rows = {"Bypass": session.evaluate(DeformationModel.bypass()),
            "MLP(sin) E2E": session.evaluate(session.inverse_mlp(g))}
    for fam in FAMILIES:
        fn = session.train_baseline(fam, f, seed=seed)
        rows[fam.upper()] = session.evaluate(DeformationModel.parametric(fn))
    f_err = float(np.mean(np.abs(f(probes()) - session.reference.forward(probes()))))
    return {"rows": rows, "seconds": time.perf_counter() - t0, "f_log_err": math.log10(f_err)}


@pytest.fixture(scope="module")
def trained():
    if os.environ.get("DEACOMP_SKIP_TRAINING"):
        pytest.skip("DEACOMP_SKIP_TRAINING is set")
    return {seed: _train_seed(seed) for seed in SEEDS}


ORDER = ["Bypass", "HFF", "LFF", "PFF", "MLP(sin) E2E"]


def _seed_summary(seed, res):
    rows = res["rows"]
    logs = [rows[k]["log_l1"] for k in ORDER]
    gain = rows["MLP(sin) E2E"]["sdr_unnorm"] - rows["Bypass"]["sdr_unnorm"]
    # "Bypass < HFF < ..." ranks by quality: each entry beats the previous one
    ranked = all(b < a for a, b in zip(logs, logs[1:]))
    hit = logs[-1] < -4.5 and gain > 30.0 and res["seconds"] < 1800
    text = (f"seed {seed}: MLP logl1 {logs[-1]:.3f}, SDR gain {gain:.1f} dB, {res['seconds'] / 60:.1f} min, "
            "logl1 " + "/".join(f"{v:.2f}" for v in logs) + f" {'ranked' if ranked else 'unranked'}")
    return hit, ranked, text


def _criterion_6(trained):
    summaries = [_seed_summary(seed, res) for seed, res in trained.items()]
    thresholds = all(h for h, _, _ in summaries)
    ranked = sum(r for _, r, _ in summaries)
    ok = thresholds and ranked >= 2
    report(6, ok, f"thresholds {'met' if thresholds else 'MISSED'}, ranking in {ranked}/3 seeds; "
                  + "; ".join(t for _, _, t in summaries))
    return thresholds, ranked


def test_criterion_6_thresholds(trained):
    """MLP(sin) E2E logl1 < -4.5, SDR gain over Bypass > 30 dB, < 30 min per seed."""
    thresholds, _ = _criterion_6(trained)
    assert thresholds


@pytest.mark.xfail(strict=True, reason="the power family cannot fit this inverse as well as LFF/HFF")
def test_criterion_6_ranking(trained):
    _, ranked = _criterion_6(trained)
    assert ranked >= 2


# 7 ---------------------------------------------------------------------------------------

def test_criterion_7_gradients():
    t0 = time.perf_counter()
    worst = {a.value: mlp_worst_error(a, draws=100, seed=11) for a in nn.Activation}
    worst.update({f"{f.value}": baseline_worst_error(f, draws=100, seed=11) for f in baselines.Family})
    dt = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-5 and dt < 60.0
    assert report(7, ok, f"worst relative gradient error {top:.1e} <= 1e-5 over "
                         f"{len(worst)} models x 100 draws; {dt:.1f} s")


# 8 ---------------------------------------------------------------------------------------

def test_criterion_8_harmonic_suppression(f_ref, calib, reference):
    pqi = DeformationModel.dense(ivp.solve_curves(reference, ivp.PQI_TOL, 12000.0).inverse)
    thd_bypass = curves.tone_thd(f_ref, DeformationModel.bypass(), calib, f0=1000.0)
    thd_pqi = curves.tone_thd(f_ref, pqi, calib, f0=1000.0)
    ok = thd_pqi < thd_bypass and thd_pqi < 0.1
    assert report(8, ok, f"1 kHz tone THD: bypass {thd_bypass:.3f} %, PQI {thd_pqi:.2e} % (< 0.1 %)")


# 9 ---------------------------------------------------------------------------------------

def test_criterion_9_timing():
    cfg = cli.RunConfig()
    taus = [1e-7, 1e-9, 1e-11, 1e-13]
    rows = cli.bench_rows(cfg, taus, [1000], 1000, [_backend.BACKEND])
    med = {(r[0], r[2]): r[5] for r in rows}
    rk = [med[("RK45", t)] for t in taus]
    mlp = [med[("MLP", t)] for t in taus]
    spread = (max(mlp) - min(mlp)) / min(mlp)
    increasing = all(b > a for a, b in zip(rk, rk[1:]))
    ok = increasing and spread < 0.10
    assert report(9, ok, "RK45 median ms " + " < ".join(f"{v * 1e3:.3f}" for v in rk)
                  + f" over tau_r 1e-7..1e-13; MLP spread {spread * 100:.1f} % < 10 %"
                  + f" ({_backend.BACKEND} kernels, 1000 reps)")


# 10 --------------------------------------------------------------------------------------

def test_criterion_10_property_suites(ref_pair, tmp_path):
    fails = []
    # monotone curves and exact nodes
    for curve in (ref_pair.forward, ref_pair.inverse):
        if not np.all(np.diff(curve.y) < 0):
            fails.append(f"{curve.direction.value} nodes not monotone")
        if not np.array_equal(curve(curve.x), curve.y):
            fails.append(f"{curve.direction.value} dense output misses its nodes")
        xs = np.linspace(*curve.domain, 100_001)
        ys = curve(xs)
        if np.any(np.diff(ys) > 10 * (1e-16 + 1e-13 * np.abs(ys[:-1]))):
            fails.append(f"{curve.direction.value} dense output not monotone")
    # LayerNorm statistics
    cfg = nn.MlpConfig((1, 64, 64, 1), "sin")
    m = nn.MlpModel.initialize(cfg, seed=5)
    x = np.random.default_rng(0).uniform(-3, 3, (200, 1))
    _, tr = nn._forward(m.params, cfg, x, eps=1e-12)
    for _, _, _, n, _ in tr.layers:
        if np.max(np.abs(n.mean(axis=1))) > 1e-10 or np.max(np.abs(n.var(axis=1) - 1)) > 1e-6:
            fails.append("LayerNorm statistics")
    # Softplus positivity
    for act in nn.Activation:
        mm = nn.MlpModel.initialize(nn.MlpConfig((1, 16, 16, 1), act), seed=3)
        mm.params["b2"][:] = -800.0
        if not np.all(mm(np.linspace(-1e3, 1e3, 501)) > 0):
            fails.append(f"softplus positivity ({act.value})")
    # WAV quantization bound
    s = np.random.default_rng(1).uniform(-1, 1, 4800)
    signals.wav_write(tmp_path / "r.wav", signals.SampledSignal(48000.0, s), bits=16)
    if np.max(np.abs(signals.wav_read(tmp_path / "r.wav").samples - s)) > 2.0 ** -15:
        fails.append("WAV round trip")
    # metric identities
    r = np.random.default_rng(2).standard_normal(4096)
    noise = np.random.default_rng(3).standard_normal(4096)
    noise *= np.linalg.norm(r) / np.linalg.norm(noise) / 10
    ids = [
        (signals.metric_log_l1(r, r), -16.0, 0.0),
        (signals.metric_log_l1(r + 1e-3, r), -3.0, 1e-12),
        (signals.metric_l1_stft(r, r), 0.0, 0.0),
        (signals.metric_l1_stft(2 * r, r), 20 * math.log10(2), 1e-9),
        (signals.metric_sdr(r, r), 160.0, 0.0),
        (signals.metric_sdr(r + noise, r), 20.0, 1e-9),
    ]
    for got, want, tol in ids:
        if abs(got - want) > tol:
            fails.append(f"metric identity {got} != {want}")
    ok = not fails
    assert report(10, ok, "monotonicity, node exactness, LayerNorm, softplus, WAV, metric identities"
                  if ok else "; ".join(fails))
