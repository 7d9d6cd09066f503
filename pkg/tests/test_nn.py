import json

import numpy as np
import pytest

from deacomp import nn
from deacomp.errors import DivergenceError, DomainError, FormatError, ShapeError, StateError

from gradcheck import mlp_worst_error

SMALL = nn.MlpConfig((1, 8, 8, 1), "sin")


def zero_model(activation="identity"):
    cfg = nn.MlpConfig((1, 4, 4, 1), activation)
    params = {k: np.zeros_like(v) for k, v in nn.init_params(cfg, np.random.default_rng(0)).items()}
    return nn.MlpModel(cfg, params)


# -- matrix and config ---------------------------------------------------------------------

def test_matrix_validation():
    m = nn.Matrix.column([1.0, 2.0, 3.0])
    assert m.shape == (3, 1) and m.rows == 3 and m.cols == 1
    with pytest.raises(DomainError):
        nn.Matrix([[1.0, float("inf")]])
    with pytest.raises(ShapeError):
        nn.Matrix(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("kw", [
    dict(layer_dims=(2, 8, 1)), dict(layer_dims=(1, 0, 1)), dict(output_activation="relu"),
    dict(dtype="float16"), dict(input_scale=0.0), dict(hidden_activation="gelu"),
])
def test_config_validation(kw):
    with pytest.raises((ShapeError, DomainError, ValueError)):
        nn.MlpConfig(**kw)


def test_config_dict_round_trip():
    cfg = nn.forward_config(32, "tanh", dtype="float32")
    assert nn.MlpConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.input_scale == 1e-3 and cfg.layer_dims == (1, 32, 32, 1)


def test_model_rejects_bad_params():
    good = nn.init_params(SMALL, np.random.default_rng(0))
    bad = dict(good, W1=np.zeros((8, 7)))
    with pytest.raises(ShapeError):
        nn.MlpModel(SMALL, bad)
    with pytest.raises(ShapeError):
        nn.MlpModel(SMALL, {k: v for k, v in good.items() if k != "b0"})
    with pytest.raises(DomainError):
        nn.MlpModel(SMALL, dict(good, b0=np.full(8, np.nan)))


# -- forward ------------------------------------------------------------------------------

@pytest.mark.parametrize("act", ["identity", "sin", "tanh", "relu"])
def test_constant_network(act):
    y = nn.forward(zero_model(act), nn.Matrix.column(np.linspace(-5, 5, 11))).data
    assert np.allclose(y, np.log(2.0), rtol=0, atol=1e-15)


@pytest.mark.parametrize("act", list(nn.Activation))
def test_outputs_positive(act):
    m = nn.MlpModel.initialize(nn.MlpConfig((1, 16, 16, 1), act), seed=3)
    m.params["b2"][:] = -800.0  # drive the head far into the softplus tail
    y = m(np.linspace(-1e3, 1e3, 501))
    assert np.all(y > 0)


def test_softplus():
    z = np.array([-1e4, -800.0, -40.0, 0.0, 40.0, 800.0])
    s = nn.softplus(z)
    assert np.all(s > 0) and np.all(np.isfinite(s))
    assert s[3] == pytest.approx(np.log(2.0))
    assert s[-1] == 800.0 and s[2] == pytest.approx(np.exp(-40.0), rel=1e-12)


def test_batch_independence():
    m = nn.MlpModel.initialize(SMALL, seed=1)
    x = np.linspace(-3, 3, 25)
    batched = m(x)
    for i in (0, 7, 24):
        assert m(x[i:i + 1])[0] == pytest.approx(batched[i], rel=1e-15, abs=0)


def test_forward_shape_errors():
    m = nn.MlpModel.initialize(SMALL)
    with pytest.raises(ShapeError):
        nn.forward(m, np.zeros((4, 2)))


def test_layernorm_statistics():
    cfg = nn.MlpConfig((1, 64, 64, 1), "sin")
    m = nn.MlpModel.initialize(cfg, seed=5)
    x = np.random.default_rng(0).uniform(-3, 3, (200, 1))
    for eps in (nn.LN_EPS, 1e-12):
        _, tr = nn._forward(m.params, cfg, x, eps=eps)
        for _, _, a, n, _ in tr.layers:
            var_a = a.var(axis=1)
            assert np.max(np.abs(n.mean(axis=1))) < 1e-10
            # with eps > 0 the normalized variance is var / (var + eps)
            assert np.allclose(n.var(axis=1), var_a / (var_a + eps), rtol=0, atol=1e-12)
            if eps == 1e-12:
                assert np.max(np.abs(n.var(axis=1) - 1.0)) < 1e-6


def test_float32_close_to_float64():
    m64 = nn.MlpModel.initialize(SMALL, seed=2)
    m32 = nn.MlpModel(nn.MlpConfig((1, 8, 8, 1), "sin", dtype="float32"), m64.params)
    x = np.linspace(-2, 2, 50)
    assert np.allclose(m32(x), m64(x), rtol=1e-5)


# -- backward -----------------------------------------------------------------------------

def test_backward_requires_forward():
    m = nn.MlpModel.initialize(SMALL)
    x = np.ones((3, 1))
    with pytest.raises(StateError):
        nn.backward(m, x, np.ones((3, 1)))
    nn.forward(m, x)
    with pytest.raises(StateError):
        nn.backward(m, x.copy(), np.ones((3, 1)))
    with pytest.raises(ShapeError):
        nn.backward(m, x, np.ones((2, 1)))


def test_constant_loss_zero_gradients():
    m = nn.MlpModel.initialize(SMALL)
    x = np.linspace(-1, 1, 9).reshape(-1, 1)
    nn.forward(m, x)
    g = nn.backward(m, x, np.zeros((9, 1)))
    assert all(np.all(v == 0) for v in g.values())


def test_l1_subgradient():
    loss, d = nn.l1_loss(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 2.0, 5.0, 4.5]))
    assert loss == pytest.approx((1 + 0 + 2 + 0.5) / 4)
    assert np.array_equal(d, np.array([1.0, 0.0, -1.0, -1.0]) / 4)


def test_relu_subgradient_at_zero():
    z = np.array([[-1.0, 0.0, 2.0]])
    assert np.array_equal(nn._act_grad(nn.Activation.RELU, z, np.maximum(z, 0)), [[0.0, 0.0, 1.0]])


@pytest.mark.parametrize("act", [a.value for a in nn.Activation])
def test_gradients_match_finite_differences(act):
    assert mlp_worst_error(act, draws=5, seed=7) < 1e-5


def test_value_and_slope():
    m = nn.MlpModel.initialize(nn.forward_config(16), seed=4)
    V = np.linspace(0, 8000, 7)
    y, dy = m.value_and_slope(V)
    h = 1e-2
    assert np.allclose(dy, (m(V + h) - m(V - h)) / (2 * h), rtol=1e-6, atol=1e-12)
    assert np.array_equal(y, m(V))


# -- Adam ---------------------------------------------------------------------------------

def test_adam_zero_gradient():
    st = nn.AdamState(1e-3)
    p = {"w": np.array([1.0, -2.0])}
    out = nn.adam_step(st, p, {"w": np.zeros(2)})
    assert np.array_equal(out["w"], p["w"]) and st.step == 1


def test_adam_schedule():
    st = nn.AdamState(2e-5)
    assert st.learning_rate(19_999) == 2e-5
    assert st.learning_rate(20_000) == pytest.approx(0.9 * 2e-5)
    assert st.learning_rate(40_000) == pytest.approx(0.81 * 2e-5)


def test_adam_single_step_on_quadratic():
    # L = (w - 3)^2 at w = 1: g = -4; after bias correction m/sqrt(v) = g/|g|
    st = nn.AdamState(0.1)
    out = nn.adam_step(st, {"w": np.array([1.0])}, {"w": np.array([-4.0])})
    assert out["w"][0] == pytest.approx(1.0 + 0.1 * 4.0 / (4.0 + 1e-8), rel=1e-14)


def test_adam_validation():
    with pytest.raises(DomainError):
        nn.AdamState(1e-3, beta1=1.0)
    with pytest.raises(ShapeError):
        nn.adam_step(nn.AdamState(1e-3), {"w": np.zeros(2)}, {"w": np.zeros(3)})


# -- training -----------------------------------------------------------------------------

def test_zero_steps_returns_init(ref_pair, calib):
    cfg = nn.forward_config(8)
    s = nn.TrainSettings(steps=0, seed=11)
    f = nn.train_forward_model(ref_pair.forward, cfg, s)
    init = nn.MlpModel(cfg, nn.init_params(cfg, np.random.default_rng(11)))
    assert all(np.array_equal(f.params[k], init.params[k]) for k in init.params)
    g = nn.train_inverse_standard(ref_pair.inverse, calib, nn.inverse_config(8), s)
    assert all(np.array_equal(g.params[k], init.params[k]) for k in init.params)


def test_forward_training_reduces_loss(ref_pair):
    hist = []
    s = nn.TrainSettings(steps=600, eta0=3e-3, batch=128, decay_interval=200, log_every=100)
    nn.train_forward_model(ref_pair.forward, nn.forward_config(16, dtype="float32"), s, history=hist)
    assert len(hist) == 6 and hist[-1][1] < hist[0][1] / 3
    assert hist[-1][2] == pytest.approx(3e-3 * 0.9 ** 2)


def test_training_deterministic(ref_pair):
    s = nn.TrainSettings(steps=30, eta0=1e-3, batch=64, seed=5)
    a = nn.train_forward_model(ref_pair.forward, nn.forward_config(8), s)
    b = nn.train_forward_model(ref_pair.forward, nn.forward_config(8), s)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_e2e_freezes_forward(ref_pair, calib):
    f = nn.MlpModel.initialize(nn.forward_config(8), seed=9)
    before = {k: v.copy() for k, v in f.params.items()}
    hist = []
    nn.train_inverse_e2e(f, calib, nn.inverse_config(8),
                         nn.TrainSettings(steps=20, eta0=1e-3, batch=32), history=hist)
    assert all(np.array_equal(before[k], f.params[k]) for k in before)
    assert hist and np.isfinite(hist[-1][1])


def test_e2e_objective_zero_for_exact_inverse(ref_pair, calib):
    from deacomp.curves import CurveForward
    obj = nn.e2e_objective(CurveForward(ref_pair.forward), calib.alpha, calib.a0, calib.a1)
    x = np.linspace(calib.x_lo, calib.x_hi, 101).reshape(-1, 1)
    x_hat = ref_pair.inverse(calib.target(x)) / calib.alpha
    loss, _ = obj(x, x_hat)
    assert loss < 1e-12


def test_divergence_detected(ref_pair, calib):
    class Broken:
        def value_and_slope(self, V):
            return np.full(np.shape(V), np.nan), np.zeros(np.shape(V))
    with pytest.raises(DivergenceError):
        nn.train_inverse_e2e(Broken(), calib, nn.inverse_config(4), nn.TrainSettings(steps=3, batch=4))


def test_loss_log_csv():
    text = nn.loss_log_csv([(99, 0.5, 1e-3), (199, 0.25, 1e-3)])
    assert text.splitlines() == ["step,loss,lr", "99,0.5,0.001", "199,0.25,0.001"]


# -- checkpoints --------------------------------------------------------------------------

def test_checkpoint_round_trip():
    m = nn.MlpModel.initialize(nn.inverse_config(12, "tanh", dtype="float32"), seed=8)
    blob = nn.save_checkpoint(m, {"seed": 8})
    doc = json.loads(blob)
    assert doc["version"] == 1 and doc["config"]["hidden_activation"] == "tanh"
    assert doc["config"]["layer_dims"] == [1, 12, 12, 1] and doc["meta"] == {"seed": 8}
    m2 = nn.load_checkpoint(blob)
    x = np.linspace(0, 8, 33)
    assert np.array_equal(m(x), m2(x))
    assert m2.config == m.config


@pytest.mark.parametrize("mutate", [
    lambda b: b[: len(b) // 2],
    lambda b: b.replace(b'"version": 1', b'"version": 7'),
    lambda b: b.replace(b'"kind": "mlp"', b'"kind": "parametric"'),
    lambda b: b"not json",
])
def test_checkpoint_errors(mutate):
    blob = nn.save_checkpoint(nn.MlpModel.initialize(nn.inverse_config(4)))
    with pytest.raises(FormatError):
        nn.load_checkpoint(mutate(blob))
