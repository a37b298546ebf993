import math

import numpy as np
import pytest

from overprune.data import Dataset, TeacherSpec, generate_teacher
from overprune.network import NetworkShape
from overprune.numerics import RngState
from overprune.posterior import Family, Prior, kl_diag_gauss, kl_term
from overprune.training import (
    TRACE_HEADER,
    Adam,
    AdamState,
    NonFiniteLoss,
    ShapeMismatch,
    TrainConfig,
    TrainingTrace,
    adam_step,
    train,
)


def reference_adam(x, grad_fn, steps, lr=0.005, b1=0.9, b2=0.99, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
    return x


def test_adam_matches_reference_on_quadratic():
    cfg = TrainConfig()
    params = {"x": np.array(1.0)}
    state = AdamState.zeros_like(params)
    for _ in range(3):
        params, state = adam_step(params, {"x": 2.0 * params["x"]}, state, cfg)
    assert float(params["x"]) == pytest.approx(reference_adam(1.0, lambda x: 2 * x, 3), abs=1e-12)
    assert state.t == 3


def test_adam_zero_gradient_is_identity():
    params = {"a": np.array([1.0, -2.0])}
    new, _ = adam_step(params, {"a": np.zeros(2)}, AdamState.zeros_like(params), TrainConfig())
    np.testing.assert_array_equal(new["a"], params["a"])


def test_adam_first_step_is_signed_learning_rate():
    params = {"a": np.zeros(4)}
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    new, _ = adam_step(params, {"a": g}, AdamState.zeros_like(params), TrainConfig(learning_rate=0.01))
    np.testing.assert_allclose(new["a"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_pure_and_shape_checked():
    params = {"a": np.ones(2)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"a": np.ones(2)}, state, TrainConfig())
    np.testing.assert_array_equal(params["a"], np.ones(2))
    assert state.t == 0
    with pytest.raises(ShapeMismatch):
        Adam(params, TrainConfig()).step({"a": np.ones(3)})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    assert TrainConfig().iterations_for(Family.ES) == 2000
    assert TrainConfig().iterations_for(Family.MF) == 5000
    assert TrainConfig().n_mc_for(Family.FC) == 8
    assert TrainConfig().n_mc_for(Family.WN) == 1


@pytest.fixture(scope="module")
def small_problem():
    spec = TeacherSpec(shape=NetworkShape(1, 8))
    train_data, _ = generate_teacher(spec, 25, RngState(0))
    test_data, _ = generate_teacher(spec, 10, RngState(0).split("test"))
    test_data = Dataset(test_data.X, test_data.y)
    return train_data, test_data


def test_zero_iterations_records_init(small_problem):
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(30, 13)), rng.normal(size=30))
    shape = NetworkShape(13, 50)
    q, trace = train(Family.MF, data, shape, Prior(1.0), TrainConfig(iterations=0, eval_mc_samples=5))
    assert len(trace) == 1
    rec = trace.records[0]
    assert rec.iter == 0
    n_params = shape.n_weights
    # large initial complexity penalty: about ln(1e4) - 0.5 nats per weight plus the mean terms
    assert rec.kl / n_params == pytest.approx(8.71, abs=0.6)
    m = q.mean
    exact = sum(float(np.sum(kl_diag_gauss(getattr(m, k), 1e-4, 1.0))) for k in ("W", "b_w", "V", "b_v"))
    assert rec.kl == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("family", list(Family))
def test_trace_self_consistency_and_determinism(family, small_problem, tmp_path):
    train_data, test_data = small_problem
    cfg = TrainConfig(iterations=120, trace_every=50, eval_mc_samples=10)
    runs = []
    for i in range(2):
        q, trace = train(family, train_data, NetworkShape(1, 8), Prior(1.0), cfg, RngState(3), test_data)
        path = tmp_path / f"trace{i}.csv"
        trace.write_csv(path)
        runs.append(path.read_bytes())
    assert runs[0] == runs[1]
    assert [r.iter for r in trace.records] == [50, 100, 120]
    for r in trace.records:
        assert r.vfe - (r.kl + r.expected_nll) == 0.0
        assert math.isfinite(r.test_pred_nll)
    back = TrainingTrace.read_csv(tmp_path / "trace0.csv")
    assert back.records == trace.records
    assert runs[0].decode().splitlines()[0] == ",".join(TRACE_HEADER)


def windowed_means(values, per_window):
    n = len(values) // per_window
    return [float(np.mean(values[i * per_window:(i + 1) * per_window])) for i in range(n)]


@pytest.mark.parametrize("family", [Family.WN, Family.MF, Family.FC])
def test_vfe_windowed_mean_nonincreasing(family, small_problem):
    train_data, _ = small_problem
    cfg = TrainConfig(iterations=1000, trace_every=10, eval_mc_samples=2)
    _, trace = train(family, train_data, NetworkShape(1, 8), Prior(1.0), cfg, RngState(4))
    w = windowed_means(trace.column("vfe"), 20)  # 200 iterations per window
    assert all(b <= a + 0.1 for a, b in zip(w, w[1:]))
    assert w[-1] < w[0]


@pytest.mark.parametrize("family", [Family.ES, Family.MAP])
def test_point_training_nll_windowed_nonincreasing(family, small_problem):
    train_data, _ = small_problem
    cfg = TrainConfig(iterations=1000, trace_every=10, eval_mc_samples=1)
    _, trace = train(family, train_data, NetworkShape(1, 8), Prior(1.0), cfg, RngState(5))
    w = windowed_means(trace.column("expected_nll"), 20)
    assert all(b <= a + 0.1 for a, b in zip(w, w[1:]))
    assert trace.column("kl")[-1] >= 0.0
    if family is Family.ES:
        assert np.all(trace.column("kl") == 0.0)


def test_fix_noise_keeps_noise(small_problem):
    train_data, _ = small_problem
    cfg = TrainConfig(iterations=30, fix_noise=True, init_log_noise_std=math.log(0.1), eval_mc_samples=1)
    q, _ = train(Family.MF, train_data, NetworkShape(1, 8), Prior(1.0), cfg, RngState(6))
    assert q.mean.log_noise_std == math.log(0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_is_reported():
    data = Dataset(np.ones((3, 1)), np.array([1e300, -1e300, 1e300]))
    with pytest.raises(NonFiniteLoss) as err:
        train(Family.MF, data, NetworkShape(1, 2), Prior(1.0), TrainConfig(iterations=5, eval_mc_samples=1))
    assert err.value.iteration == 1


def test_training_reduces_vfe_from_init(small_problem):
    train_data, _ = small_problem
    cfg = TrainConfig(iterations=300, trace_every=300, eval_mc_samples=1)
    shape = NetworkShape(1, 8)
    _, t0 = train(Family.MF, train_data, shape, Prior(1.0), TrainConfig(iterations=0, eval_mc_samples=1), RngState(7))
    q, t1 = train(Family.MF, train_data, shape, Prior(1.0), cfg, RngState(7))
    assert t1.records[-1].vfe < t0.records[0].vfe
    assert kl_term(q, Prior(1.0)) < t0.records[0].kl
