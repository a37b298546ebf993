"""Full-batch Adam training for every family, with trace recording."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .diagnostics import mean_predictive_ll
from .network import NetworkShape, map_penalty, point_gradients
from .numerics import RngState
from .posterior import (
    Family,
    Prior,
    VariationalPosterior,
    draw_noise,
    expected_nll_with_noise,
    init_posterior,
    kl_term,
    vfe_gradients,
)

TRACE_HEADER = ("iter", "kl", "expected_nll", "vfe", "train_pred_nll", "test_pred_nll")


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, trace: "TrainingTrace", detail: str = ""):
        super().__init__(f"non-finite objective at iteration {iteration} {detail}".strip())
        self.iteration = iteration
        self.trace = trace


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    iterations: int | None = None  # None: 2000 for ES, 5000 otherwise
    trace_every: int = 50
    eval_mc_samples: int = 100
    seed: int = 0
    n_mc: int | None = None  # None: 8 for FC, 1 otherwise
    trace_mc: int = 8
    sigma_init: float = 1e-4
    init_log_noise_std: float = 0.0
    fix_noise: bool = False

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")

    def iterations_for(self, family: Family) -> int:
        if self.iterations is not None:
            return self.iterations
        return 2000 if family is Family.ES else 5000

    def n_mc_for(self, family: Family) -> int:
        if self.n_mc is not None:
            return self.n_mc
        return 8 if family is Family.FC else 1


@dataclass
class TraceRecord:
    iter: int
    kl: float
    expected_nll: float
    vfe: float
    train_pred_nll: float
    test_pred_nll: float


@dataclass
class TrainingTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([r.iter] + [repr(float(getattr(r, k))) for k in TRACE_HEADER[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainingTrace":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [TraceRecord(int(r["iter"]), *(float(r[k]) for k in TRACE_HEADER[1:])) for r in rows]
        )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
                   {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}, self.t)


class Adam:
    """In-place Adam with bias correction over a dict of arrays.

    Parameters absent from the gradient dict are left untouched.
    """

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig, state: AdamState | None = None):
        self.params = params
        self.config = config
        self.state = state if state is not None else AdamState.zeros_like(params)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg, st = self.config, self.state
        st.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        step_size = cfg.learning_rate / (1.0 - b1**st.t)
        inv_bc2 = 1.0 / (1.0 - b2**st.t)
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if k not in self.params or np.shape(self.params[k]) != g.shape or st.m[k].shape != g.shape:
                raise ShapeMismatch(f"gradient {k!r} has shape {g.shape}")
            m, v = st.m[k], st.v[k]
            m *= b1
            m += (1.0 - b1) * g
            g2 = g * g
            g2 *= 1.0 - b2
            v *= b2
            v += g2
            upd = np.multiply(v, inv_bc2, out=np.empty_like(v))
            np.sqrt(upd, out=upd)
            upd += cfg.epsilon
            np.divide(m, upd, out=upd)
            upd *= step_size
            # a fresh array, so earlier posterior snapshots stay intact
            self.params[k] = self.params[k] - upd


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One Adam update without mutating its inputs; returns (new_params, new_state)."""
    opt = Adam(dict(params), config, state.copy())
    opt.step(grads)
    return opt.params, opt.state


def _point_objective(q: VariationalPosterior, prior: Prior, X, y):
    prior_std = prior.std if q.family is Family.MAP else None
    loss, g = point_gradients(q.mean, X, y, prior_std)
    grads = {"W": g.W, "b_w": g.b_w, "V": g.V, "b_v": np.array(g.b_v), "log_noise_std": np.array(g.log_noise_std)}
    return loss, grads


def record_state(q, prior, train: Dataset, test: Dataset | None, config: TrainConfig, rng: RngState, it: int):
    """Objective terms and predictive NLLs, all with one fixed evaluation stream."""
    X, y = train.X, train.y
    if q.family.is_point:
        kl = map_penalty(q.mean, prior.std) if q.family is Family.MAP else 0.0
        enll, _ = point_gradients(q.mean, X, y)
    else:
        noise = draw_noise(q, X.shape[0], config.trace_mc, rng.split("trace-vfe"))
        enll, _ = expected_nll_with_noise(q, X, y, noise, want_grad=False)
        kl = kl_term(q, prior)
    pred = rng.split("trace-pred")
    train_nll = -mean_predictive_ll(q, train, config.eval_mc_samples, pred)
    test_nll = -mean_predictive_ll(q, test, config.eval_mc_samples, pred) if test is not None else math.nan
    return TraceRecord(it, float(kl), float(enll), float(kl) + float(enll), train_nll, test_nll)


def train(
    family,
    train_data: Dataset,
    shape: NetworkShape,
    prior: Prior,
    config: TrainConfig,
    rng: RngState | None = None,
    test_data: Dataset | None = None,
    init: VariationalPosterior | None = None,
    weight_std: float = 0.1,
    bias_std: float = 0.1,
) -> tuple[VariationalPosterior, TrainingTrace]:
    """Optimize ``family`` on ``train_data`` with full-batch Adam.

    ``init`` overrides the default initialization (e.g. a truth-initialized
    MF posterior). Records land after every ``trace_every``-th step and after
    the last one; with zero iterations the initial state is recorded once.
    """
    family = Family.parse(family)
    rng = rng if rng is not None else RngState(config.seed)
    if init is None:
        q = init_posterior(
            family, shape, prior, rng, config.sigma_init, weight_std, bias_std, config.init_log_noise_std
        )
    else:
        q = init.copy()
    X, y = train_data.X, train_data.y
    iters = config.iterations_for(family)
    n_mc = config.n_mc_for(family)
    eval_rng = rng.split("eval")
    trace = TrainingTrace()

    if iters == 0:
        trace.records.append(record_state(q, prior, train_data, test_data, config, eval_rng, 0))
        return q, trace

    opt = Adam(q.params(), config)
    for t in range(1, iters + 1):
        if family.is_point:
            loss, grads = _point_objective(q, prior, X, y)
        else:
            est, grads = vfe_gradients(q, prior, X, y, n_mc, rng.split("iter", t))
            loss = est.total
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(t, trace, f"({family.value}, loss={loss})")
        if config.fix_noise:
            grads.pop("log_noise_std", None)
        opt.step(grads)
        q = q.with_params(opt.params)
        if t % config.trace_every == 0 or t == iters:
            trace.records.append(record_state(q, prior, train_data, test_data, config, eval_rng, t))
    return q, trace
