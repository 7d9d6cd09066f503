"""``deacomp`` command-line tool.

Subcommands: solve, sweep, train, compensate, evaluate, bench.  Settings come
from built-in defaults, then an optional JSON file (``--config``), then flags.
Voltages are volts everywhere except ``--*-kv`` flags.  Every artifact carries
the tool version and a hash of the resolved configuration.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__, _backend, baselines, curves, ivp, nn, physics, signals  # noqa: E402
from .errors import DeacompError, DomainError, FormatError, OutOfDomain  # noqa: E402

log = logging.getLogger("deacomp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "DEACOMP_OUTPUT_DIR"


class ConfigError(DeacompError):
    pass


TRAINING_PRESETS = {
    # single-core desk budget: narrow float32 nets, fast learning-rate decay
    "desk": dict(steps=50_000, eta_f=3e-3, eta_g=1e-2, eta_baseline=1e-2, batch=1024,
                 width=64, decay_interval=600, dtype="float32"),
    # 1M steps at width 512; days of CPU time
    "full": dict(steps=1_000_000, eta_f=1e-6, eta_g=1e-5, eta_baseline=1e-5, batch=1024,
                  width=512, decay_interval=20_000, dtype="float64"),
}


@dataclass(frozen=True)
class RunConfig:
    params_preset: str = "reference"
    params: dict = field(default_factory=dict)
    tau_a: float = 1e-16
    tau_r: float = 1e-13
    pqi_tau_a: float = 1e-9
    pqi_tau_r: float = 1e-6
    V_min: float = 0.0
    V_max: float = 8000.0
    V_dc: float = 6000.0
    V_pp: float = 3000.0
    reference_extent: float = 1.5
    alpha: float = 1000.0
    n_probes: int = 1000
    stft_window: int = 1024
    stft_hop: int = 256
    fs: float = 48000.0
    sweep_duration: float = 1.0
    sweep_f_start: float = 0.0
    sweep_f_end: float = 12000.0
    training_preset: str = "desk"
    steps: int | None = None
    eta_f: float | None = None
    eta_g: float | None = None
    eta_baseline: float | None = None
    batch: int | None = None
    width: int | None = None
    decay_interval: int | None = None
    dtype: str | None = None
    activation: str = "sin"
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.training_preset not in TRAINING_PRESETS:
            raise ConfigError(f"training_preset must be one of {sorted(TRAINING_PRESETS)}")
        for key, value in TRAINING_PRESETS[self.training_preset].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        self.validate()

    def validate(self):
        try:
            self.material()
            ivp.Tolerances(self.tau_a, self.tau_r)
            ivp.Tolerances(self.pqi_tau_a, self.pqi_tau_r)
            nn.Activation(self.activation)
        except (DomainError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        lo, hi = self.V_dc - self.V_pp / 2, self.V_dc + self.V_pp / 2
        checks = [
            (0 <= self.V_min < self.V_max, "need 0 <= V_min < V_max"),
            (self.V_pp > 0 and self.V_min <= lo and hi <= self.V_max,
             f"drive window [{lo}, {hi}] V must lie inside [{self.V_min}, {self.V_max}]"),
            (self.alpha > 0, "alpha must be positive"),
            (self.reference_extent >= 1, "reference_extent must be >= 1"),
            (self.n_probes >= 2, "n_probes must be >= 2"),
            (0 < self.stft_hop <= self.stft_window, "need 0 < stft_hop <= stft_window"),
            (self.fs > 0 and self.sweep_duration > 0, "fs and sweep_duration must be positive"),
            (0 <= self.sweep_f_start < self.fs / 2 and 0 <= self.sweep_f_end < self.fs / 2,
             "sweep frequencies must lie in [0, fs/2)"),
            (self.steps >= 0 and self.batch > 0 and self.width > 0 and self.decay_interval > 0,
             "steps >= 0 and positive batch, width, decay_interval required"),
            (min(self.eta_f, self.eta_g, self.eta_baseline) > 0, "learning rates must be positive"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (self.params_preset in ("reference", "default"), "params_preset must be reference or default"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def material(self) -> physics.MaterialParams:
        base = physics.reference_params() if self.params_preset == "reference" else physics.default_params()
        d = base.to_dict()
        if "Y" in self.params and "mu" not in self.params and self.params_preset == "default":
            d.pop("mu")
        d.update(self.params)
        return physics.MaterialParams.from_dict(d)

    @property
    def tol(self) -> ivp.Tolerances:
        return ivp.Tolerances(self.tau_a, self.tau_r)

    @property
    def pqi_tol(self) -> ivp.Tolerances:
        return ivp.Tolerances(self.pqi_tau_a, self.pqi_tau_r)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def train_settings(self, eta: float, seed: int | None = None) -> nn.TrainSettings:
        return nn.TrainSettings(steps=self.steps, eta0=eta, batch=self.batch,
                                seed=self.seed if seed is None else seed,
                                decay_interval=self.decay_interval)

    def eval_settings(self) -> curves.EvalSettings:
        return curves.EvalSettings(self.n_probes, self.sweep_f_start, self.sweep_f_end,
                                   self.sweep_duration, self.fs, self.V_dc, self.V_pp,
                                   self.stft_window, self.stft_hop)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# -- shared pipeline pieces (also used by the test-suite) ----------------------------------

class Session:
    """Lazily built reference curves and calibration for one configuration."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.params = cfg.material()
        self._ref = None
        self._cal = None

    @property
    def reference(self) -> ivp.CurvePair:
        """Forward model used for all evaluation: dense output at the reference
        tolerances, extended past V_max so compensators may overshoot."""
        if self._ref is None:
            self._ref = ivp.solve_curves(self.params, self.cfg.tol,
                                         self.cfg.reference_extent * self.cfg.V_max)
        return self._ref

    @property
    def f_ref(self) -> curves.DeformationModel:
        return curves.DeformationModel.dense(self.reference.forward)

    @property
    def calibration(self) -> curves.CompensatorCalibration:
        if self._cal is None:
            self._cal = curves.calibrate(self.f_ref, self.cfg.alpha,
                                         V_lo=self.cfg.V_min, V_hi=self.cfg.V_max)
        return self._cal

    def pqi_inverse(self, tau_r: float | None = None) -> curves.DeformationModel:
        tol = self.cfg.pqi_tol if tau_r is None else ivp.Tolerances.paired(tau_r)
        pair = ivp.solve_curves(self.params, tol, self.cfg.reference_extent * self.cfg.V_max)
        return curves.DeformationModel.dense(pair.inverse)

    def forward_for_training(self, spec: str):
        """``"pqi"`` (the reference dense curve) or a path to an f checkpoint."""
        if spec == "pqi":
            return curves.CurveForward(self.reference.forward)
        return read_mlp(spec)

    def train_f(self, seed=None, history=None) -> nn.MlpModel:
        cfg = self.cfg
        mcfg = nn.forward_config(cfg.width, cfg.activation, dtype=cfg.dtype)
        return nn.train_forward_model(self.reference.forward, mcfg, cfg.train_settings(cfg.eta_f, seed),
                                      cfg.V_max, history)

    def train_g(self, forward, seed=None, history=None, activation=None) -> nn.MlpModel:
        cfg = self.cfg
        mcfg = nn.inverse_config(cfg.width, activation or cfg.activation, dtype=cfg.dtype)
        return nn.train_inverse_e2e(forward, self.calibration, mcfg,
                                    cfg.train_settings(cfg.eta_g, seed), history)

    def train_g_standard(self, seed=None, history=None, activation=None) -> nn.MlpModel:
        cfg = self.cfg
        mcfg = nn.inverse_config(cfg.width, activation or cfg.activation, dtype=cfg.dtype)
        return nn.train_inverse_standard(self.reference.inverse, self.calibration, mcfg,
                                         cfg.train_settings(cfg.eta_g, seed), history)

    def train_baseline(self, family, forward, seed=None, history=None) -> baselines.ParametricFn:
        return baselines.train_baseline(baselines.ParametricFn.initial(family), forward,
                                        self.calibration,
                                        self.cfg.train_settings(self.cfg.eta_baseline, seed), history)

    def inverse_mlp(self, model: nn.MlpModel) -> curves.DeformationModel:
        cal = self.calibration
        return curves.DeformationModel.mlp(model, ivp.Direction.STRETCH_TO_VOLTAGE,
                                           (min(cal.x_lo, cal.x_hi), max(cal.x_lo, cal.x_hi)))

    def evaluate(self, g: curves.DeformationModel) -> dict:
        return curves.evaluate_compensator(self.f_ref, g, self.calibration, self.cfg.eval_settings())


def read_mlp(path) -> nn.MlpModel:
    return nn.load_checkpoint(Path(path).read_bytes())


def resolve_compensator(session: Session, spec: str) -> tuple[str, curves.DeformationModel]:
    """``bypass``, ``pqi``, ``pqi:<tau_r>``, ``mlp:<checkpoint>`` or ``baseline:<checkpoint>``."""
    kind, _, arg = spec.partition(":")
    if kind == "bypass":
        return "Bypass", curves.DeformationModel.bypass()
    if kind == "pqi":
        tau_r = float(arg) if arg else None
        label = "PQI" if not arg else f"PQI({arg})"
        return label, session.pqi_inverse(tau_r)
    if kind == "mlp":
        blob = Path(arg).read_bytes()
        model = nn.load_checkpoint(blob)
        meta = json.loads(blob).get("meta", {})
        g = session.inverse_mlp(model)
        return meta.get("label", g.label), g
    if kind == "baseline":
        fn = baselines.ParametricFn.from_json(Path(arg).read_bytes())
        return fn.family.value.upper(), curves.DeformationModel.parametric(fn)
    raise ConfigError(f"unknown compensator spec {spec!r}")


# -- artifact writing ---------------------------------------------------------------------

class Artifacts:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.dir = out
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = {"tool": "deacomp", "version": __version__, "config_hash": cfg.digest()}
        self.written = []

    def _path(self, name) -> Path:
        p = self.dir / name
        self.written.append(p)
        return p

    def csv(self, name, columns, rows):
        lines = [f"# deacomp {__version__} config_hash={self.header['config_hash']}",
                 ",".join(columns)]
        for row in rows:
            lines.append(",".join(_fmt(v) for v in row))
        self._path(name).write_text("\n".join(lines) + "\n")

    def json(self, name, payload: dict):
        doc = dict(self.header)
        doc.update(payload)
        self._path(name).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")

    def raw(self, name, data: bytes):
        self._path(name).write_bytes(data)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


# -- commands -----------------------------------------------------------------------------

PROBE_COLUMNS = ["V", "lambda", "V_roundtrip", "roundtrip_error"]


def solve_rows(cfg: RunConfig, params, tol, V_max, allow_partial=False):
    pair = ivp.solve_curves(params, tol, V_max, allow_partial=allow_partial)
    V_top = min(V_max, pair.forward.domain[1])
    V = np.linspace(0.0, V_top, cfg.n_probes)
    lam = pair.forward(V)
    back = pair.inverse(lam)
    return pair, V, lam, back


def cmd_solve(cfg: RunConfig, art: Artifacts, args) -> int:
    params = cfg.material()
    pair, V, lam, back = solve_rows(cfg, params, cfg.tol, cfg.V_max)
    err = np.abs(back - V)
    art.csv("solve_probe.csv", PROBE_COLUMNS, zip(V, lam, back, err))
    art.csv("curve_voltage_to_stretch.csv", ["V", "lambda"], zip(pair.forward.x, pair.forward.y))
    art.csv("curve_stretch_to_voltage.csv", ["lambda", "V"], zip(pair.inverse.x, pair.inverse.y))
    art.json("curve_voltage_to_stretch.json", json.loads(pair.forward.to_json()))
    art.json("curve_stretch_to_voltage.json", json.loads(pair.inverse.to_json()))
    pull = ivp.pull_in_limit(params, cfg.tol)
    summary = {
        "params": params.to_dict(), "tau_a": cfg.tau_a, "tau_r": cfg.tau_r, "V_max": cfg.V_max,
        "n_nodes": int(pair.forward.x.size), "lambda_at_V_max": float(pair.forward(cfg.V_max)),
        "max_roundtrip_error": float(err.max()), "relative_roundtrip_error": float(err.max() / cfg.V_max),
        "pull_in": dataclasses.asdict(pull),
    }
    art.json("solve_summary.json", summary)
    print(f"lambda({cfg.V_max:g} V) = {summary['lambda_at_V_max']:.9f}; "
          f"max |f_dagger(f(V)) - V| = {summary['max_roundtrip_error']:.3e} V "
          f"over {cfg.n_probes} probes; {summary['n_nodes']} nodes")
    return EXIT_OK


def default_grid(parameter: str, points: int):
    if parameter == "T":
        return list(np.logspace(-3.3, -2.3, points))
    if parameter == "R":
        return list(np.logspace(-2.8, -2.1, points))
    return [1e-5, 1e-8, 1e-11]


def cmd_sweep(cfg: RunConfig, art: Artifacts, args) -> int:
    grid = args.grid if args.grid else default_grid(args.parameter, args.points)
    base = cfg.material()
    rows, failed = [], 0
    for i, value in enumerate(grid):
        params, tol = base, cfg.tol
        if args.parameter in ("T", "R"):
            params = base.replace(**{args.parameter: float(value)})
        else:
            tol = ivp.Tolerances.paired(float(value))
        try:
            pair, V, lam, back = solve_rows(cfg, params, tol, cfg.V_max, allow_partial=True)
        except DeacompError as exc:
            failed += 1
            log.error("%s=%g failed: %s", args.parameter, value, exc)
            rows.append((value, "failed", 0, float("nan"), float("nan"), float("nan")))
            continue
        err = np.abs(back - V)
        art.csv(f"sweep_{args.parameter}_{i}.csv", PROBE_COLUMNS, zip(V, lam, back, err))
        V_top = float(V[-1])
        status = "ok" if V_top >= cfg.V_max else "partial"
        rows.append((value, status, pair.forward.x.size, V_top, float(lam[-1]), float(err.max())))
    art.csv(f"sweep_{args.parameter}.csv",
            [args.parameter, "status", "n_nodes", "V_reached", "lambda_at_V_reached", "max_roundtrip_error"],
            rows)
    for r in rows:
        print(f"{args.parameter}={r[0]:.4g}  {r[1]:<7} nodes={r[2]:<4} V={r[3]:.6g}  "
              f"lambda={r[4]:.6f}  roundtrip={r[5]:.3e}")
    return EXIT_NUMERIC if failed == len(grid) else EXIT_OK


def cmd_train(cfg: RunConfig, art: Artifacts, args) -> int:
    session = Session(cfg)
    history: list = []
    meta = {"seed": cfg.seed, "config_hash": cfg.digest(), "version": __version__, "target": args.target}
    if args.target in ("g", "baseline") and not args.forward:
        raise ConfigError(f"--forward is required for target {args.target} (checkpoint path or 'pqi')")
    act = cfg.activation
    if args.target == "f":
        model = session.train_f(history=history)
        name, meta["label"] = f"f_{act}", f"f_MLP({act})"
    elif args.target == "g":
        model = session.train_g(session.forward_for_training(args.forward), history=history)
        name, meta["label"] = f"g_{act}_e2e", f"MLP({act}) E2E"
    elif args.target == "g-standard":
        model = session.train_g_standard(history=history)
        name, meta["label"] = f"g_{act}_standard", f"MLP({act})"
    else:
        if not args.family:
            raise ConfigError("--family is required for target baseline")
        fn = session.train_baseline(args.family, session.forward_for_training(args.forward),
                                    history=history)
        name = f"baseline_{fn.family.value}"
        doc = json.loads(fn.to_json())
        doc["meta"] = meta
        art.raw(f"{name}.json", json.dumps(doc, indent=1).encode())
        art.csv(f"{name}_loss.csv", ["step", "loss", "lr"], history)
        print(f"{name}: theta = {fn.theta}")
        return EXIT_OK
    meta["calibration"] = session.calibration.to_dict()
    art.raw(f"{name}.json", nn.save_checkpoint(model, meta))
    art.csv(f"{name}_loss.csv", ["step", "loss", "lr"], history)
    final = history[-1][1] if history else float("nan")
    print(f"{name}: {cfg.steps} steps, final mean loss {final:.3e} -> {art.dir / (name + '.json')}")
    return EXIT_OK


def cmd_compensate(cfg: RunConfig, art: Artifacts, args) -> int:
    session = Session(cfg)
    cal = session.calibration
    label, g = resolve_compensator(session, args.compensator)
    src = signals.wav_read(args.input)
    x_dc, x_amp = cfg.V_dc / cfg.alpha, cfg.V_pp / (2 * cfg.alpha)
    x = x_dc + x_amp * src.samples
    x_hat = np.asarray(curves.compensate(g, cal, x))
    V = cfg.alpha * x_hat
    lo, hi = cfg.V_min, cfg.V_max
    n_clamped = int(np.count_nonzero((V < lo) | (V > hi)))
    if n_clamped:
        log.warning("%d drive samples outside [%g, %g] V clamped", n_clamped, lo, hi)
        V = np.clip(V, lo, hi)
    lam = curves.forward_stretch(session.f_ref, V)
    lam_unit = (lam - cal.target(x_dc)) / (cal.a1 * x_amp)  # ideal response reproduces the input
    stem = Path(args.input).stem
    # drive WAV spans the full amplifier range: V_min -> -1, V_max -> +1
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    signals.wav_write(art.dir / f"{stem}_drive.wav",
                      signals.SampledSignal(src.fs, (V - mid) / half), args.bits)
    signals.wav_write(art.dir / f"{stem}_stretch.wav", signals.SampledSignal(src.fs, lam_unit), args.bits)
    report = {"compensator": label, "input": str(args.input), "samples": int(x.size), "fs": src.fs,
              "drive_wav_scale": {"V_at_minus_1": lo, "V_at_plus_1": hi},
              "clamped_samples": n_clamped,
              "drive_min_V": float(V.min()), "drive_max_V": float(V.max()),
              "outputs": [f"{stem}_drive.wav", f"{stem}_stretch.wav"]}
    if np.any(src.samples != 0):
        report["sdr_db"] = signals.metric_sdr(lam, cal.target(x))
    if args.tone_hz:
        report["thd_percent"] = signals.metric_thd(lam, args.tone_hz, src.fs)
        lam_bypass = curves.forward_stretch(session.f_ref, np.clip(cfg.alpha * x, lo, hi))
        report["thd_bypass_percent"] = signals.metric_thd(lam_bypass, args.tone_hz, src.fs)
    art.json(f"{stem}_report.json", report)
    print(json.dumps(report, indent=1))
    return EXIT_OK


EVAL_COLUMNS = ["g", "log_l1", "l1_stft_unnorm", "sdr_unnorm", "l1_stft_norm", "sdr_norm"]


def cmd_evaluate(cfg: RunConfig, art: Artifacts, args) -> int:
    session = Session(cfg)
    specs = args.specs or ["bypass", "pqi"]
    rows = []
    for spec in specs:
        try:
            label, g = resolve_compensator(session, spec)
            row = session.evaluate(g)
            row["g"] = label
            rows.append(row)
        except (OSError, DeacompError, ValueError) as exc:
            log.warning("skipping %s: %s", spec, exc)
    if not rows:
        log.error("no compensator could be evaluated")
        return EXIT_IO
    art.csv("evaluation.csv", EVAL_COLUMNS, ([r[c] for c in EVAL_COLUMNS] for r in rows))
    art.json("evaluation.json", {"rows": rows, "calibration": session.calibration.to_dict()})
    print(f"{'g':<18}" + "".join(f"{c:>16}" for c in EVAL_COLUMNS[1:]))
    for r in rows:
        print(f"{r['g']:<18}" + "".join(f"{r[c]:>16.4f}" for c in EVAL_COLUMNS[1:]))
    return EXIT_OK


def _interleaved_times(fns, reps):
    """Per-call wall times, ``reps`` rounds visiting every function once per
    round, so slow drifts in machine load hit all of them alike."""
    times = np.empty((len(fns), reps))
    for fn in fns:
        fn()  # warm-up
    for r in range(reps):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            times[i, r] = time.perf_counter() - t0
    return times


def bench_rows(cfg: RunConfig, tau_grid, sample_grid, reps, backends, mlp_model=None):
    """Timing rows ``(method, backend, tau_r, n, reps, median, p10, p90)``."""
    params = cfg.material()
    session = Session(cfg)
    lam_lo = float(session.reference.forward(cfg.V_max))
    model = mlp_model or nn.MlpModel.initialize(nn.inverse_config(cfg.width, cfg.activation, dtype=cfg.dtype))
    rows = []
    for n in sample_grid:
        lam = np.linspace(lam_lo, 1.0, n)
        x = np.linspace(0.0, cfg.V_max / cfg.alpha, n)
        jobs = []
        for tau_r in tau_grid:
            tol = ivp.Tolerances.paired(tau_r)
            for b in backends:
                # RK45: integrate at this tolerance, then read the samples off the
                # step polynomials; PQI: evaluate a curve solved ahead of time
                curve = ivp.solve_stretch_to_voltage(params, tol, lam_lo, backend=b)
                jobs.append(("RK45", b, tau_r, lambda b=b, tol=tol: ivp.solve_stretch_to_voltage(
                    params, tol, lam_lo, backend=b)(lam, backend=b)))
                jobs.append(("PQI", b, tau_r, lambda b=b, c=curve: c(lam, backend=b)))
            jobs.append(("MLP", "numpy", tau_r, lambda: model(x)))
        times = _interleaved_times([j[3] for j in jobs], reps)
        for (method, b, tau_r, _), t in zip(jobs, times):
            rows.append((method, b, tau_r, n, reps, float(np.median(t)),
                         float(np.percentile(t, 10)), float(np.percentile(t, 90))))
    return rows


def cmd_bench(cfg: RunConfig, art: Artifacts, args) -> int:
    backends = args.backends.split(",") if args.backends else [_backend.BACKEND]
    model = read_mlp(args.mlp) if args.mlp else None
    rows = bench_rows(cfg, args.tau_grid, args.samples, args.reps, backends, model)
    cols = ["method", "backend", "tau_r", "n_samples", "reps", "median_s", "p10_s", "p90_s"]
    art.csv("bench.csv", cols, rows)
    for r in rows:
        print(f"{r[0]:<5} {r[1]:<9} tau_r={r[2]:<8.0e} n={r[3]:<6} median={r[5] * 1e3:9.4f} ms")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def _kv(value: str) -> float:
    return float(value) * 1e3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, config, ./deacomp_out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--params-preset", choices=["reference", "default"])
    for name in ("T", "R", "Y", "mu", "epsr", "F_r"):
        common.add_argument(f"--{name}", type=float, dest=f"p_{name}", help=f"override material {name}")
    common.add_argument("--tau-r", type=float)
    common.add_argument("--tau-a", type=float)
    common.add_argument("--vmax-kv", type=_kv, dest="V_max")
    common.add_argument("--vdc-kv", type=_kv, dest="V_dc")
    common.add_argument("--vpp-kv", type=_kv, dest="V_pp")
    common.add_argument("--alpha", type=float)
    common.add_argument("--probes", type=int, dest="n_probes")
    common.add_argument("--steps", type=int)
    common.add_argument("--width", type=int)
    common.add_argument("--activation", choices=[a.value for a in nn.Activation])
    common.add_argument("--training-preset", choices=sorted(TRAINING_PRESETS))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deacomp", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"deacomp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("solve", parents=[common], help="solve both curves and the round-trip error")

    sp = sub.add_parser("sweep", parents=[common], help="solve over a parameter grid")
    sp.add_argument("--parameter", choices=["T", "R", "tau_r"], required=True)
    sp.add_argument("--grid", type=float, nargs="+")
    sp.add_argument("--points", type=int, default=5, help="log-spaced points for T/R")

    tp = sub.add_parser("train", parents=[common], help="train f, g or a baseline")
    tp.add_argument("--target", choices=["f", "g", "g-standard", "baseline"], required=True)
    tp.add_argument("--family", choices=[f.value for f in baselines.Family])
    tp.add_argument("--forward", help="f checkpoint for g/baseline targets, or 'pqi'")

    cp = sub.add_parser("compensate", parents=[common], help="compensate a WAV file")
    cp.add_argument("--input", required=True)
    cp.add_argument("--compensator", default="bypass",
                    help="bypass | pqi[:tau_r] | mlp:<ckpt> | baseline:<ckpt>")
    cp.add_argument("--tone-hz", type=float, help="report THD for a tonal input at this frequency")
    cp.add_argument("--bits", type=int, default=16, choices=[16, 24])

    ep = sub.add_parser("evaluate", parents=[common], help="metric table for compensators")
    ep.add_argument("specs", nargs="*", help="compensator specs (default: bypass pqi)")

    bp = sub.add_parser("bench", parents=[common], help="timing of RK45, PQI and MLP")
    bp.add_argument("--tau-grid", type=float, nargs="+", default=[1e-7, 1e-9, 1e-11, 1e-13])
    bp.add_argument("--samples", type=int, nargs="+", default=[1000])
    bp.add_argument("--reps", type=int, default=1000)
    bp.add_argument("--backends", help="comma list of compiled,python (default: active)")
    bp.add_argument("--mlp", help="g checkpoint to time (default: untrained net of the same size)")
    return parser


_FLAG_KEYS = ("seed", "params_preset", "tau_r", "tau_a", "V_max", "V_dc", "V_pp", "alpha",
              "n_probes", "steps", "width", "activation", "training_preset")


def resolve_config(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    if args.tau_r is not None and args.tau_a is None and "tau_a" not in d:
        d["tau_a"] = 1e-3 * args.tau_r
    overrides = {k[2:]: v for k, v in vars(args).items() if k.startswith("p_") and v is not None}
    if overrides:
        d["params"] = {**d.get("params", {}), **overrides}
    if args.out:
        d["output_dir"] = args.out
    elif os.environ.get(OUTPUT_ENV):
        d["output_dir"] = os.environ[OUTPUT_ENV]
    return RunConfig.from_dict(d)


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "train": cmd_train,
            "compensate": cmd_compensate, "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        art = Artifacts(cfg, Path(cfg.output_dir or "deacomp_out"))
        art.json("run_config.json", {"command": args.command, "config": cfg.to_dict()})
        return COMMANDS[args.command](cfg, art, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OutOfDomain, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
