"""Predictive evaluation and per-hidden-unit over-pruning diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .network import gauss_log_lik, hidden, predict
from .numerics import RngState, log_mean_exp
from .posterior import (
    Family,
    FamilyMismatch,
    Prior,
    VariationalPosterior,
    draw_noise,
    expected_nll_with_noise,
    kl_diag_gauss,
    sample_params,
)

HIST_BINS = 41
HIST_RANGE = (-1.05, 1.05)


class UnitOutOfRange(IndexError):
    pass


def posterior_predictive_ll(q: VariationalPosterior, X, y, M: int, rng: RngState, log_y_scale: float = 0.0):
    """Per-point log of the M-sample Monte Carlo predictive density.

    Each theta_i is shared by all points. ``log_y_scale`` (log of the target
    scaler's std) is subtracted to report densities in original units.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if q.family.is_point:
        p = q.mean
        return gauss_log_lik(y, predict(p, X), p.noise_std) - log_y_scale
    ll = np.empty((M, y.shape[0]))
    for i in range(M):
        p = sample_params(q, rng.split("pred", i))
        ll[i] = gauss_log_lik(y, predict(p, X), p.noise_std)
    return log_mean_exp(ll, axis=0) - log_y_scale


def mean_predictive_ll(q, data, M: int, rng: RngState) -> float:
    """Average held-out log-likelihood in the data's original units."""
    return float(np.mean(posterior_predictive_ll(q, data.X, data.y, M, rng, data.log_y_scale)))


@dataclass(frozen=True)
class PruneThresholds:
    out_mean_max: float = 0.1
    incoming_kl_max: float = 0.01

    def __post_init__(self):
        if not (self.out_mean_max > 0 and self.incoming_kl_max > 0):
            raise ValueError("thresholds must be positive")

    @classmethod
    def for_prior(cls, prior: Prior, incoming_kl_max: float = 0.01) -> "PruneThresholds":
        return cls(0.1 * prior.std, incoming_kl_max)


@dataclass
class UnitStats:
    unit: int
    out_mean: float
    out_std: float
    incoming_kl: float
    in_mean_abs_max: float
    in_std_rel_dev_max: float
    hist_counts: list[int]
    pruned: bool


@dataclass
class PruningReport:
    thresholds: PruneThresholds
    prior_std: float
    n_samples: int
    n_data: int
    units: list[UnitStats] = field(default_factory=list)

    @property
    def pruned_count(self) -> int:
        return sum(u.pruned for u in self.units)

    @property
    def pruned_units(self) -> list[int]:
        return [u.unit for u in self.units if u.pruned]

    def to_dict(self) -> dict:
        lo, hi = HIST_RANGE
        return {
            "thresholds": asdict(self.thresholds),
            "prior_std": self.prior_std,
            "n_samples": self.n_samples,
            "n_data": self.n_data,
            "pruned_count": self.pruned_count,
            "hist_edges": np.linspace(lo, hi, HIST_BINS + 1).tolist(),
            "units": [asdict(u) for u in self.units],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _require_distribution(q):
    if q.family.is_point:
        raise FamilyMismatch(f"unit statistics need a distribution, got {q.family.value}")


def incoming_kl(q: VariationalPosterior, prior: Prior) -> np.ndarray:
    """Mean KL from the prior over each unit's D incoming weights and its bias."""
    m, s = q.mean, q.marginal_stds()
    kl_w = kl_diag_gauss(m.W, s.W, prior.std)
    kl_b = kl_diag_gauss(m.b_w, s.b_w, prior.std)
    return (kl_w.sum(axis=1) + kl_b) / (m.W.shape[1] + 1)


def unit_report(
    q: VariationalPosterior,
    X,
    prior: Prior,
    n_samples: int = 25,
    thresholds: PruneThresholds | None = None,
    rng: RngState | None = None,
) -> PruningReport:
    _require_distribution(q)
    thresholds = thresholds or PruneThresholds.for_prior(prior)
    rng = rng or RngState(0)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m, s = q.mean, q.marginal_stds()
    kl_in = incoming_kl(q, prior)
    in_mu = np.column_stack([m.W, m.b_w])
    in_sd = np.column_stack([s.W, s.b_w])

    acts = np.stack([hidden(sample_params(q, rng.split("act", i)), X) for i in range(n_samples)])
    report = PruningReport(thresholds, prior.std, n_samples, X.shape[0])
    for j in range(q.shape.hidden_units):
        counts, _ = np.histogram(acts[:, :, j], bins=HIST_BINS, range=HIST_RANGE)
        pruned = bool(abs(m.V[j]) < thresholds.out_mean_max and kl_in[j] < thresholds.incoming_kl_max)
        report.units.append(
            UnitStats(
                unit=j,
                out_mean=float(m.V[j]),
                out_std=float(s.V[j]),
                incoming_kl=float(kl_in[j]),
                in_mean_abs_max=float(np.max(np.abs(in_mu[j]))),
                in_std_rel_dev_max=float(np.max(np.abs(in_sd[j] - prior.std)) / prior.std),
                hist_counts=counts.astype(int).tolist(),
                pruned=pruned,
            )
        )
    return report


def clamp_output_weight(q: VariationalPosterior, unit: int) -> VariationalPosterior:
    """Copy of an MF posterior with q(v_unit) set to a point mass at zero."""
    if q.family is not Family.MF:
        raise FamilyMismatch("clamping is defined for MF posteriors")
    if not 0 <= unit < q.shape.hidden_units:
        raise UnitOutOfRange(f"unit {unit} outside 0..{q.shape.hidden_units - 1}")
    c = q.copy()
    c.mean.V[unit] = 0.0
    c.rho.V[unit] = -np.inf
    return c


def collapse_check(q: VariationalPosterior, X, y, unit: int, rng: RngState, n_mc: int = 1, clamp: bool = True) -> float:
    """Norm of the expected-NLL gradient on a unit's incoming mean and rho parameters.

    Under the clamp the likelihood no longer depends on those parameters, so
    the norm is zero.
    """
    if q.family is not Family.MF:
        raise FamilyMismatch("collapse_check is defined for MF posteriors")
    if not 0 <= unit < q.shape.hidden_units:
        raise UnitOutOfRange(f"unit {unit} outside 0..{q.shape.hidden_units - 1}")
    if clamp:
        q = clamp_output_weight(q, unit)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    noise = draw_noise(q, X.shape[0], n_mc, rng)
    _, g = expected_nll_with_noise(q, X, y, noise)
    parts = [g["W"][unit], g["b_w"][unit], g["rho_W"][unit], g["rho_b_w"][unit]]
    return float(math.sqrt(sum(float(np.sum(np.square(a))) for a in parts)))


def sample_functions(q: VariationalPosterior, x_grid, n_functions: int, rng: RngState) -> np.ndarray:
    """(n_functions, len(x_grid)) table of f(x) for draws theta ~ q; 1-D inputs."""
    if q.family is Family.ES:
        raise FamilyMismatch("ES has no posterior over functions")
    if q.shape.input_dim != 1:
        raise ValueError("sample_functions needs a 1-D input network")
    x = np.asarray(x_grid, dtype=np.float64).reshape(-1, 1)
    return np.stack([predict(sample_params(q, rng.split("fn", i)), x) for i in range(n_functions)])


def write_function_samples(x_grid, table: np.ndarray, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + [f"f{i}" for i in range(table.shape[0])])
        for i, x in enumerate(np.asarray(x_grid).reshape(-1)):
            w.writerow([repr(float(x))] + [repr(float(v)) for v in table[:, i]])


def count_slope_sign_changes(values, rel_tol: float = 1e-3) -> int:
    """Number of slope sign changes along a sampled curve.

    Differences smaller than ``rel_tol`` times the largest difference are
    treated as flat and ignored.
    """
    d = np.diff(np.asarray(values, dtype=np.float64))
    if d.size == 0:
        return 0
    scale = np.max(np.abs(d))
    if scale == 0:
        return 0
    signs = np.sign(d[np.abs(d) > rel_tol * scale])
    return int(np.sum(signs[1:] != signs[:-1]))
