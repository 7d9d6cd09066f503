"""Three-layer MLP surrogates with hand-written reverse mode, Adam and the
standard / end-to-end training loops.

Topology is fixed: ``Linear -> act -> LayerNorm`` for each hidden layer and
``Linear -> Softplus`` at the head.  Parameters live in a flat dict of numpy
arrays (``W0, b0, ln_g0, ln_b0, W1, ...``), weights stored ``fan_in x fan_out``
so a batch ``(N, d)`` is propagated as ``h @ W + b``.
"""
from __future__ import annotations

import base64
import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import DivergenceError, DomainError, FormatError, ShapeError, StateError

log = logging.getLogger(__name__)

LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


class Activation(str, enum.Enum):
    SIN = "sin"
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


def _act(kind: Activation, z):
    if kind is Activation.SIN:
        return np.sin(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _act_grad(kind: Activation, z, a):
    if kind is Activation.SIN:
        return np.cos(z)
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)  # subgradient 0 at the kink
    if kind is Activation.TANH:
        return 1.0 - a * a
    return None


def softplus(z):
    out = np.logaddexp(0.0, z)
    # exp(z) underflows for z below about -745; keep the codomain positive
    return np.maximum(out, np.finfo(out.dtype).tiny)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Matrix:
    """Dense row-major matrix of finite reals."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix needs 2-D data, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("Matrix entries must be finite")
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def column(cls, values) -> "Matrix":
        return cls(np.asarray(values, dtype=np.float64).reshape(-1, 1))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def to_numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


@dataclass(frozen=True)
class MlpConfig:
    layer_dims: tuple = (1, 512, 512, 1)
    hidden_activation: Activation = Activation.SIN
    layernorm_after_hidden: bool = True
    input_scale: float = 1.0
    output_scale: float = 1.0
    output_activation: str = "softplus"
    dtype: str = "float64"  # compute precision; checkpoints always store float64

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        if len(dims) < 2 or dims[0] != 1 or dims[-1] != 1:
            raise ShapeError(f"layer_dims must start and end with 1, got {dims}")
        if any(d <= 0 for d in dims):
            raise ShapeError(f"layer widths must be positive, got {dims}")
        if self.output_activation != "softplus":
            raise DomainError("only a softplus head is supported")
        if self.dtype not in ("float64", "float32"):
            raise DomainError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if not (self.input_scale > 0 and self.output_scale > 0):
            raise DomainError("input_scale and output_scale must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        d["hidden_activation"] = self.hidden_activation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(**d)


def forward_config(width: int = 512, activation=Activation.SIN, **kw) -> MlpConfig:
    """Config for ``f_theta``: volts in (read as kilovolts), stretch out."""
    return MlpConfig((1, width, width, 1), Activation(activation), input_scale=1e-3, **kw)


def inverse_config(width: int = 512, activation=Activation.SIN, **kw) -> MlpConfig:
    """Config for ``g_theta``: signal in, drive in signal units out."""
    return MlpConfig((1, width, width, 1), Activation(activation), **kw)


def param_names(cfg: MlpConfig) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        names += [f"W{i}", f"b{i}"]
        if i < cfg.n_layers - 1 and cfg.layernorm_after_hidden:
            names += [f"ln_g{i}", f"ln_b{i}"]
    return names


def init_params(cfg: MlpConfig, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, biases uniform in +-1/sqrt(fan_in), unit LN gain."""
    params = {}
    dims = cfg.layer_dims
    for i in range(cfg.n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"b{i}"] = rng.uniform(-1.0, 1.0, size=fan_out) / math.sqrt(fan_in)
        if i < cfg.n_layers - 1 and cfg.layernorm_after_hidden:
            params[f"ln_g{i}"] = np.ones(fan_out)
            params[f"ln_b{i}"] = np.zeros(fan_out)
    return params


@dataclass
class _Trace:
    batch: object
    x: np.ndarray
    layers: list  # per hidden layer: (h_in, z, a, n, inv_std)
    h_last: np.ndarray
    z_out: np.ndarray


def _affine(h, W, b):
    # rank-1 products are much cheaper as broadcasts than as BLAS calls
    if W.shape[0] == 1:
        return h * W + b
    return h @ W + b


def _row_mean(a, ones):
    return a @ ones  # ones = 1/width column: a BLAS gemv beats ndarray.mean


def _forward(params: dict, cfg: MlpConfig, x: np.ndarray, batch=None, eps=LN_EPS):
    dt = np.dtype(cfg.dtype)
    h = (x * cfg.input_scale).astype(dt, copy=False)
    P = {k: v.astype(dt, copy=False) for k, v in params.items()}
    layers = []
    last = cfg.n_layers - 1
    for i in range(last):
        z = _affine(h, P[f"W{i}"], P[f"b{i}"])
        a = _act(cfg.hidden_activation, z)
        n = inv_std = None
        if cfg.layernorm_after_hidden:
            ones = np.full((z.shape[1], 1), 1.0 / z.shape[1], dtype=dt)
            d = a - _row_mean(a, ones)
            inv_std = 1.0 / np.sqrt(_row_mean(d * d, ones) + eps)
            n = d * inv_std
            h_next = n * P[f"ln_g{i}"] + P[f"ln_b{i}"]
        else:
            h_next = a
        layers.append((h, z, a, n, inv_std))
        h = h_next
    z_out = _affine(h, P[f"W{last}"], P[f"b{last}"])
    y = cfg.output_scale * softplus(z_out)
    return y, _Trace(batch, x, layers, h, z_out)


def _backward(params: dict, cfg: MlpConfig, tr: _Trace, dy: np.ndarray, want_params=True):
    """Reverse pass.  Returns (param grads or None, dL/dx)."""
    dt = np.dtype(cfg.dtype)
    P = {k: v.astype(dt, copy=False) for k, v in params.items()}
    grads = {} if want_params else None
    last = cfg.n_layers - 1
    dz = dy.astype(dt, copy=False) * (cfg.output_scale * _sigmoid(tr.z_out))
    if want_params:
        grads[f"W{last}"] = tr.h_last.T @ dz
        grads[f"b{last}"] = dz.sum(axis=0)
    for i in range(last, 0, -1):
        W = P[f"W{i}"]
        dh = dz * W.T if W.shape[1] == 1 else dz @ W.T
        h_in, z, a, n, inv_std = tr.layers[i - 1]
        if cfg.layernorm_after_hidden:
            if want_params:
                grads[f"ln_g{i - 1}"] = (dh * n).sum(axis=0)
                grads[f"ln_b{i - 1}"] = dh.sum(axis=0)
            ones = np.full((dh.shape[1], 1), 1.0 / dh.shape[1], dtype=dt)
            dn = dh * P[f"ln_g{i - 1}"]
            da = inv_std * (dn - _row_mean(dn, ones) - n * _row_mean(dn * n, ones))
        else:
            da = dh
        g = _act_grad(cfg.hidden_activation, z, a)
        dz = da if g is None else da * g
        if want_params:
            grads[f"W{i - 1}"] = h_in.T @ dz
            grads[f"b{i - 1}"] = dz.sum(axis=0)
    dx = (dz @ P["W0"].T) * cfg.input_scale
    if want_params:
        grads = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}
    return grads, np.asarray(dx, dtype=np.float64)


class MlpModel:
    """Parameterized MLP.  ``model(x)`` maps a 1-D array to a 1-D array."""

    def __init__(self, config: MlpConfig, params: dict):
        expected = param_names(config)
        if sorted(params) != sorted(expected):
            raise ShapeError(f"parameter names {sorted(params)} do not match {sorted(expected)}")
        ref = init_params(config, np.random.default_rng(0))
        clean = {}
        for name in expected:
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != ref[name].shape:
                raise ShapeError(f"{name}: expected shape {ref[name].shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} has non-finite entries")
            clean[name] = arr
        self.config = config
        self.params = clean
        self._trace = None

    @classmethod
    def initialize(cls, config: MlpConfig, seed: int = 0) -> "MlpModel":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def copy(self) -> "MlpModel":
        return MlpModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y, _ = _forward(self.params, self.config, x.reshape(-1, 1))
        return np.asarray(y, dtype=np.float64).reshape(x.shape)

    def value_and_slope(self, x):
        """Outputs and d(output)/d(input) at ``x`` (1-D)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        y, tr = _forward(self.params, self.config, x)
        _, dx = _backward(self.params, self.config, tr, np.ones_like(x), want_params=False)
        return np.asarray(y, dtype=np.float64).ravel(), dx.ravel()

    def __repr__(self):
        c = self.config
        return f"MlpModel(dims={c.layer_dims}, act={c.hidden_activation.value}, params={self.n_params})"


def _as_batch(batch) -> np.ndarray:
    data = batch.data if isinstance(batch, Matrix) else np.asarray(batch, dtype=np.float64)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    return data


def forward(model: MlpModel, batch) -> Matrix:
    """Batched forward pass of an ``N x 1`` batch; caches intermediates for
    ``backward`` on the same batch object."""
    x = _as_batch(batch)
    if x.ndim != 2 or x.shape[1] != model.config.layer_dims[0]:
        raise ShapeError(f"batch must be N x {model.config.layer_dims[0]}, got {x.shape}")
    y, tr = _forward(model.params, model.config, x, batch=batch)
    model._trace = tr
    return Matrix(np.asarray(y, dtype=np.float64))


def backward(model: MlpModel, batch, upstream) -> dict:
    """Parameter gradients for upstream ``dL/dy`` of the last ``forward`` on
    ``batch``.  The input gradient is returned under the key ``"input"``."""
    tr = model._trace
    if tr is None or tr.batch is not batch:
        raise StateError("backward requires a preceding forward on the same batch")
    dy = _as_batch(upstream)
    if dy.shape != (tr.x.shape[0], 1):
        raise ShapeError(f"upstream must be {tr.x.shape[0]} x 1, got {dy.shape}")
    grads, dx = _backward(model.params, model.config, tr, dy)
    grads["input"] = dx
    return grads


def l1_loss(pred, target):
    """Mean absolute error and its gradient ``sign(pred - target) / N``."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# -- Adam -----------------------------------------------------------------------------------

@dataclass
class AdamState:
    eta0: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay: float = 0.9
    interval: int = 20_000
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise DomainError("Adam betas must lie in (0, 1)")
        if not self.eta0 > 0 or self.interval <= 0:
            raise DomainError("eta0 and interval must be positive")

    def learning_rate(self, step: int | None = None) -> float:
        t = self.step if step is None else step
        return self.eta0 * self.decay ** (t // self.interval)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays."""
    lr = state.learning_rate()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return out


# -- training --------------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSettings:
    steps: int = 50_000
    eta0: float = 1e-6
    batch: int = 1024
    seed: int = 0
    decay_interval: int = 20_000
    log_every: int = 100


class ForwardModel(Protocol):
    def value_and_slope(self, V): ...


LossLog = list  # rows of (step, loss, lr)


def _run(params: dict, settings: TrainSettings, loss_and_grads: Callable, rng, history: LossLog | None):
    state = AdamState(settings.eta0, interval=settings.decay_interval)
    window = []
    for step in range(settings.steps):
        lr = state.learning_rate()
        loss, grads = loss_and_grads(params, rng)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        params = adam_step(state, params, grads)
        if history is not None:
            window.append(loss)
            if len(window) == settings.log_every or step == settings.steps - 1:
                history.append((step, float(np.mean(window)), lr))
                window = []
    return params


def train_forward_model(curve, cfg: MlpConfig, settings: TrainSettings = TrainSettings(),
                        V_max: float = 8000.0, history: LossLog | None = None) -> MlpModel:
    """Fit ``f_theta: V -> lambda`` to the tabulated curve with an L1 loss,
    sampling V uniformly on ``[0, V_max]`` each step."""
    if curve.domain[1] < V_max:
        raise DomainError(f"curve covers V up to {curve.domain[1]}, below V_max={V_max}")
    rng = np.random.default_rng(settings.seed)
    model = MlpModel(cfg, init_params(cfg, rng))

    def loss_and_grads(params, rng):
        V = rng.uniform(0.0, V_max, size=(settings.batch, 1))
        target = curve(V)
        y, tr = _forward(params, cfg, V)
        loss, dy = l1_loss(y, target)
        grads, _ = _backward(params, cfg, tr, dy)
        return loss, grads

    return MlpModel(cfg, _run(model.params, settings, loss_and_grads, rng, history))


def e2e_objective(forward_model: ForwardModel, alpha: float, a0: float, a1: float):
    """Loss for a compensator ``x -> x_hat``: ``mean |f(alpha x_hat) - (a0 + a1 x)|``.

    Returns ``fn(x, x_hat) -> (loss, dL/dx_hat)``.
    """
    def fn(x, x_hat):
        lam, slope = forward_model.value_and_slope(alpha * x_hat.ravel())
        loss, dlam = l1_loss(lam, a0 + a1 * x.ravel())
        return loss, (dlam * slope * alpha).reshape(x_hat.shape)
    return fn


def train_inverse_e2e(forward_model: ForwardModel, calib, cfg: MlpConfig,
                      settings: TrainSettings = TrainSettings(eta0=1e-5),
                      history: LossLog | None = None) -> MlpModel:
    """End-to-end fit of ``g_theta`` through a frozen differentiable forward model.

    ``forward_model`` is an MlpModel or any object with ``value_and_slope``;
    its parameters are never updated.
    """
    rng = np.random.default_rng(settings.seed)
    model = MlpModel(cfg, init_params(cfg, rng))
    objective = e2e_objective(forward_model, calib.alpha, calib.a0, calib.a1)

    def loss_and_grads(params, rng):
        x = rng.uniform(calib.x_lo, calib.x_hi, size=(settings.batch, 1))
        y, tr = _forward(params, cfg, x)
        loss, dy = objective(x, np.asarray(y, dtype=np.float64))
        grads, _ = _backward(params, cfg, tr, dy)
        return loss, grads

    return MlpModel(cfg, _run(model.params, settings, loss_and_grads, rng, history))


def train_inverse_standard(curve_inverse, calib, cfg: MlpConfig,
                           settings: TrainSettings = TrainSettings(eta0=1e-5),
                           history: LossLog | None = None) -> MlpModel:
    """Supervised fit of ``g_theta`` to ``x -> f_dagger(a0 + a1 x) / alpha``."""
    rng = np.random.default_rng(settings.seed)
    model = MlpModel(cfg, init_params(cfg, rng))
    lo, hi = curve_inverse.domain

    def loss_and_grads(params, rng):
        x = rng.uniform(calib.x_lo, calib.x_hi, size=(settings.batch, 1))
        lam = np.clip(calib.a0 + calib.a1 * x, lo, hi)
        target = curve_inverse(lam) / calib.alpha
        y, tr = _forward(params, cfg, x)
        loss, dy = l1_loss(y, target)
        grads, _ = _backward(params, cfg, tr, dy)
        return loss, grads

    return MlpModel(cfg, _run(model.params, settings, loss_and_grads, rng, history))


def loss_log_csv(history: LossLog) -> str:
    lines = ["step,loss,lr"]
    lines += [f"{s},{loss!r},{lr!r}" for s, loss, lr in history]
    return "\n".join(lines) + "\n"


# -- checkpoints -----------------------------------------------------------------------------

def encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad parameter blob: {exc}") from exc
    if len(raw) != 8 * math.prod(shape):
        raise FormatError(f"parameter blob holds {len(raw)} bytes, shape {shape} needs {8 * math.prod(shape)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def parse_envelope(blob: bytes | str, kind: str) -> dict:
    try:
        text = blob.decode("utf-8") if isinstance(blob, (bytes, bytearray)) else blob
        doc = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "deacomp.checkpoint":
        raise FormatError("not a deacomp checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}")
    if doc.get("kind") != kind:
        raise FormatError(f"checkpoint holds a {doc.get('kind')!r}, expected {kind!r}")
    for key in ("config", "params"):
        if key not in doc:
            raise FormatError(f"checkpoint missing {key!r}")
    return doc


def save_checkpoint(model: MlpModel, extra: dict | None = None) -> bytes:
    doc = {
        "format": "deacomp.checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": "mlp",
        "config": model.config.to_dict(),
        "params": {k: encode_array(v) for k, v in model.params.items()},
    }
    if extra:
        doc["meta"] = extra
    return json.dumps(doc, indent=1).encode("utf-8")


def load_checkpoint(blob: bytes | str) -> MlpModel:
    doc = parse_envelope(blob, "mlp")
    try:
        cfg = MlpConfig.from_dict(doc["config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad model config: {exc}") from exc
    params = {k: decode_array(v) for k, v in doc["params"].items()}
    try:
        return MlpModel(cfg, params)
    except (ShapeError, DomainError) as exc:
        raise FormatError(str(exc)) from exc
