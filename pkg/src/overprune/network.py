"""Single-hidden-layer tanh MLP with homoscedastic Gaussian observation noise.

    f(x) = V . tanh(W x + b_w) + b_v,    y ~ N(f(x), exp(log_noise_std)^2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import DimensionMismatch

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonPositiveNoise(ValueError):
    pass


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_units: int = 50

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_units < 1:
            raise ValueError(f"invalid network shape {self}")

    @property
    def n_input_block(self) -> int:
        """Size of the flattened {W, b_w} block."""
        return self.hidden_units * (self.input_dim + 1)

    @property
    def n_output_block(self) -> int:
        return self.hidden_units + 1

    @property
    def n_weights(self) -> int:
        """Weights and biases (everything that carries a prior)."""
        return self.n_input_block + self.n_output_block


@dataclass
class ParamPoint:
    W: np.ndarray  # (H, D)
    b_w: np.ndarray  # (H,)
    V: np.ndarray  # (H,)
    b_v: float
    log_noise_std: float = 0.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b_w = np.asarray(self.b_w, dtype=np.float64).reshape(-1)
        self.V = np.asarray(self.V, dtype=np.float64).reshape(-1)
        self.b_v = float(self.b_v)
        self.log_noise_std = float(self.log_noise_std)
        h = self.W.shape[0]
        if self.W.ndim != 2 or self.b_w.shape != (h,) or self.V.shape != (h,):
            raise DimensionMismatch(
                f"inconsistent parameter shapes W{self.W.shape} b_w{self.b_w.shape} V{self.V.shape}"
            )

    @property
    def shape(self) -> NetworkShape:
        return NetworkShape(self.W.shape[1], self.W.shape[0])

    @property
    def noise_std(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_noise_std))

    @classmethod
    def zeros(cls, shape: NetworkShape, log_noise_std: float = 0.0) -> "ParamPoint":
        h, d = shape.hidden_units, shape.input_dim
        return cls(np.zeros((h, d)), np.zeros(h), np.zeros(h), 0.0, log_noise_std)

    def copy(self) -> "ParamPoint":
        return ParamPoint(self.W.copy(), self.b_w.copy(), self.V.copy(), self.b_v, self.log_noise_std)

    def input_block(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b_w])

    def output_block(self) -> np.ndarray:
        return np.concatenate([self.V, [self.b_v]])

    @classmethod
    def from_blocks(cls, shape: NetworkShape, inp, out, log_noise_std: float = 0.0) -> "ParamPoint":
        h, d = shape.hidden_units, shape.input_dim
        inp = np.asarray(inp, dtype=np.float64)
        out = np.asarray(out, dtype=np.float64)
        return cls(inp[: h * d].reshape(h, d), inp[h * d :], out[:h], out[h], log_noise_std)

    def to_vector(self) -> np.ndarray:
        """Flatten as (W, b_w, V, b_v, log_noise_std)."""
        return np.concatenate([self.input_block(), self.output_block(), [self.log_noise_std]])

    @classmethod
    def from_vector(cls, shape: NetworkShape, vec) -> "ParamPoint":
        vec = np.asarray(vec, dtype=np.float64)
        k1, k2 = shape.n_input_block, shape.n_output_block
        if vec.shape != (k1 + k2 + 1,):
            raise DimensionMismatch(f"expected {k1 + k2 + 1} values, got {vec.shape}")
        return cls.from_blocks(shape, vec[:k1], vec[k1 : k1 + k2], vec[-1])

    def with_noise(self, log_noise_std: float) -> "ParamPoint":
        return replace(self, log_noise_std=float(log_noise_std))


def hidden(p: ParamPoint, X: np.ndarray) -> np.ndarray:
    return np.tanh(X @ p.W.T + p.b_w)


def predict(p: ParamPoint, X) -> np.ndarray:
    """Network outputs for every row of ``X`` (N, D)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != p.W.shape[1]:
        raise DimensionMismatch(f"inputs have {X.shape[1]} columns, network expects {p.W.shape[1]}")
    return hidden(p, X) @ p.V + p.b_v


def forward(p: ParamPoint, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.W.shape[1]:
        raise DimensionMismatch(f"input of shape {x.shape} for input_dim {p.W.shape[1]}")
    return float(np.tanh(p.W @ x + p.b_w) @ p.V + p.b_v)


def gauss_log_lik(y, mean, noise_std):
    """Elementwise Gaussian log density in nats."""
    noise_std = np.asarray(noise_std, dtype=np.float64)
    if np.any(noise_std <= 0):
        raise NonPositiveNoise(f"noise_std must be positive, got {noise_std}")
    r = (np.asarray(y, dtype=np.float64) - mean) / noise_std
    out = -HALF_LOG_2PI - np.log(noise_std) - 0.5 * r * r
    return out if np.ndim(out) else float(out)


def gauss_nll_and_grad(y, f, log_noise_std):
    """Summed NLL, d/df per point, and d/dlog_noise_std.

    Shared by the point-estimate and variational gradient paths.
    """
    with np.errstate(over="ignore"):  # a diverged run shows up as a non-finite loss
        inv_var = float(np.exp(-2.0 * log_noise_std))
    r = y - f
    r2 = r * r
    n = r.shape[-1]
    nll = n * (HALF_LOG_2PI + log_noise_std) + 0.5 * inv_var * np.sum(r2, axis=-1)
    d_f = -r * inv_var
    d_log_noise = n - inv_var * np.sum(r2, axis=-1)
    return nll, d_f, d_log_noise


def backprop_output(p: ParamPoint, X, h, d_f) -> ParamPoint:
    """Gradients of a loss w.r.t. network weights given dLoss/df per point."""
    dV = h.T @ d_f
    db_v = float(np.sum(d_f))
    da = np.outer(d_f, p.V) * (1.0 - h * h)
    return ParamPoint(da.T @ X, da.sum(axis=0), dV, db_v, 0.0)


def neg_log_lik(p: ParamPoint, X, y) -> float:
    nll, _, _ = gauss_nll_and_grad(np.asarray(y, dtype=np.float64), predict(p, X), p.log_noise_std)
    return float(nll)


def map_penalty(p: ParamPoint, prior_std: float) -> float:
    return float(
        (np.sum(p.W**2) + np.sum(p.b_w**2) + np.sum(p.V**2) + p.b_v**2) / (2.0 * prior_std**2)
    )


def point_gradients(p: ParamPoint, X, y, prior_std: float | None = None) -> tuple[float, ParamPoint]:
    """Loss and reverse-mode gradients of the summed NLL (plus MAP penalty).

    With ``prior_std`` set, adds sum(theta^2) / (2 prior_std^2) over all weights
    and biases; ``log_noise_std`` is never penalized.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != p.W.shape[1] or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"batch X{X.shape} y{y.shape} for network {p.shape}")
    h = hidden(p, X)
    f = h @ p.V + p.b_v
    loss, d_f, d_log_noise = gauss_nll_and_grad(y, f, p.log_noise_std)
    grads = backprop_output(p, X, h, d_f)
    grads.log_noise_std = float(d_log_noise)
    if prior_std is not None:
        s2 = prior_std**2
        loss += map_penalty(p, prior_std)
        grads.W += p.W / s2
        grads.b_w += p.b_w / s2
        grads.V += p.V / s2
        grads.b_v += p.b_v / s2
    return float(loss), grads
