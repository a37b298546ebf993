"""Dataset loading, standardization, splitting and the synthetic teacher."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import NetworkShape, ParamPoint, predict
from .numerics import RngState
from .posterior import Family, Prior, VariationalPosterior

log = logging.getLogger(__name__)


class ParseError(ValueError):
    def __init__(self, row: int, col: int, value: str):
        super().__init__(f"non-numeric value {value!r} at row {row}, column {col}")
        self.row, self.col, self.value = row, col, value


class MissingTarget(ValueError):
    pass


@dataclass(frozen=True)
class Scaler:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def transform_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_x(self, X):
        return np.asarray(X) * self.x_std + self.x_mean

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    @property
    def log_y_std(self) -> float:
        return math.log(self.y_std)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    scaler: Scaler | None = None
    name: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.scaler, self.name)

    @property
    def log_y_scale(self) -> float:
        """Add to standardized-space densities' negative logs to get original units."""
        return 0.0 if self.scaler is None else self.scaler.log_y_std


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_csv(path, target_column: int = -1, name: str | None = None) -> Dataset:
    """Read a comma-separated numeric file with at most one header line.

    ``target_column`` may be negative (counted from the end).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path} contains no data rows")
    ncol = len(rows[0])
    col = target_column + ncol if target_column < 0 else target_column
    if not 0 <= col < ncol:
        raise MissingTarget(f"target column {target_column} not present in {ncol} columns")
    values = np.empty((len(rows), ncol))
    for i, row in enumerate(rows):
        if len(row) != ncol:
            raise ParseError(i, len(row), ",".join(row))
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ParseError(i, j, cell) from None
    y = values[:, col]
    X = np.delete(values, col, axis=1)
    return Dataset(X, y, name=name if name is not None else path.stem)


def standardize(train: Dataset) -> tuple[Scaler, Dataset]:
    x_mean = train.X.mean(axis=0)
    x_std = train.X.std(axis=0)
    const = x_std <= 0
    if np.any(const):
        log.warning("constant input columns %s: std clamped to 1", np.flatnonzero(const).tolist())
        x_std = np.where(const, 1.0, x_std)
    y_std = float(train.y.std())
    if y_std <= 0:
        log.warning("constant target: std clamped to 1")
        y_std = 1.0
    scaler = Scaler(x_mean, x_std, float(train.y.mean()), y_std)
    return scaler, apply_scaler(scaler, train)


def apply_scaler(scaler: Scaler, data: Dataset) -> Dataset:
    return Dataset(scaler.transform_x(data.X), scaler.transform_y(data.y), scaler, data.name)


def unstandardize(data: Dataset) -> Dataset:
    s = data.scaler
    return Dataset(s.inverse_x(data.X), s.inverse_y(data.y), None, data.name)


def split(data: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = RngState(seed).split("split").permutation(data.n)
    n_train = math.ceil(data.n * (1.0 - test_fraction))
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


def prepare_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split then standardize both halves with train statistics only."""
    train, test = split(data, test_fraction, seed)
    scaler, train = standardize(train)
    return train, apply_scaler(scaler, test)


@dataclass
class TeacherSpec:
    shape: NetworkShape = field(default_factory=lambda: NetworkShape(1, 50))
    prior: Prior = field(default_factory=Prior)
    true_params: ParamPoint | None = None
    noise_std: float = 0.1
    input_low: float = -4.0
    input_high: float = 4.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.input_low < self.input_high:
            raise ValueError("input_low must be below input_high")


# Inference needs a finite noise level even for a noiseless teacher.
MIN_NOISE_STD = 1e-3


def sample_prior_params(shape: NetworkShape, prior: Prior, rng: RngState, noise_std: float) -> ParamPoint:
    h, d = shape.hidden_units, shape.input_dim
    s = prior.std
    return ParamPoint(
        s * rng.normal((h, d)),
        s * rng.normal(h),
        s * rng.normal(h),
        s * float(rng.normal(1)[0]),
        math.log(max(noise_std, MIN_NOISE_STD)),
    )


def generate_teacher(spec: TeacherSpec, n: int, rng: RngState) -> tuple[Dataset, ParamPoint]:
    """Simulate n noisy observations from a network with prior-drawn weights."""
    if n < 1:
        raise ValueError("n must be >= 1")
    theta = spec.true_params
    if theta is None:
        theta = sample_prior_params(spec.shape, spec.prior, rng.split("teacher"), spec.noise_std)
    g = rng.split("data")
    X = g.uniform(spec.input_low, spec.input_high, (n, spec.shape.input_dim))
    y = predict(theta, X) + spec.noise_std * g.normal(n)
    return Dataset(X, y, name=f"teacher_n{n}"), theta


def init_at_truth(teacher: ParamPoint, sigma_init: float = 1e-4) -> VariationalPosterior:
    if not sigma_init > 0:
        raise ValueError("sigma_init must be positive")
    r = math.log(sigma_init)
    h, d = teacher.W.shape
    rho = ParamPoint(np.full((h, d), r), np.full(h, r), np.full(h, r), r, 0.0)
    return VariationalPosterior(Family.MF, teacher.copy(), rho=rho)


def write_csv(data: Dataset, path) -> None:
    """Write features then target as the last column, no header."""
    path = Path(path)
    np.savetxt(path, np.column_stack([data.X, data.y]), delimiter=",", fmt="%.17g")


def write_teacher(data: Dataset, spec: TeacherSpec, theta: ParamPoint, path) -> None:
    """Dataset CSV plus a JSON sidecar with the teacher weights and spec."""
    path = Path(path)
    write_csv(data, path)
    sidecar = {
        "shape": {"input_dim": spec.shape.input_dim, "hidden_units": spec.shape.hidden_units},
        "prior_std": spec.prior.std,
        "noise_std": spec.noise_std,
        "input_low": spec.input_low,
        "input_high": spec.input_high,
        "target_column": -1,
        "true_params": {
            "W": theta.W.tolist(),
            "b_w": theta.b_w.tolist(),
            "V": theta.V.tolist(),
            "b_v": theta.b_v,
            "log_noise_std": theta.log_noise_std,
        },
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
