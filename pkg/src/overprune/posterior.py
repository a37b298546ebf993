"""Variational families over the MLP weights and the free-energy estimator.

Families:

* ``ES``  - maximum likelihood point estimate
* ``MAP`` - point estimate under the Gaussian prior
* ``WN``  - diagonal Gaussian with fixed (not learned) weight and bias stds
* ``MF``  - diagonal Gaussian with learned stds, sigma = exp(rho)
* ``FC``  - full-covariance Gaussian within each layer; two blocks, {W, b_w}
  and {V, b_v}, each with a lower Cholesky factor stored packed (row-major
  lower triangle) with its diagonal entries as log values.

``log_noise_std`` is a point parameter in every family and has no KL term.
WN and MF use the local reparameterization trick, FC samples whole weight
vectors.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .network import (
    NetworkShape,
    ParamPoint,
    gauss_nll_and_grad,
    point_gradients,
)
from .numerics import RngState

# Scale (sigma) keys follow the mean keys of ParamPoint.
WEIGHT_KEYS = ("W", "b_w", "V", "b_v")
MC_CHUNK = 64


class FamilyMismatch(ValueError):
    pass


class NonPositiveScale(ValueError):
    pass


class InvalidSigmaInit(ValueError):
    pass


class Family(str, enum.Enum):
    ES = "ES"
    MAP = "MAP"
    WN = "WN"
    MF = "MF"
    FC = "FC"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        return cls(str(value).upper())

    @property
    def is_point(self) -> bool:
        return self in (Family.ES, Family.MAP)

    @property
    def is_diagonal(self) -> bool:
        return self in (Family.WN, Family.MF)


@dataclass(frozen=True)
class Prior:
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise NonPositiveScale(f"prior std must be positive, got {self.std}")


@dataclass
class VariationalPosterior:
    family: Family
    mean: ParamPoint
    rho: ParamPoint | None = None  # MF: log stds (its log_noise_std is unused)
    weight_std: float | None = None  # WN
    bias_std: float | None = None  # WN
    chol_in: np.ndarray | None = None  # FC, packed raw factor of the {W, b_w} block
    chol_out: np.ndarray | None = None  # FC, packed raw factor of the {V, b_v} block

    @property
    def shape(self) -> NetworkShape:
        return self.mean.shape

    def copy(self) -> "VariationalPosterior":
        return VariationalPosterior(
            self.family,
            self.mean.copy(),
            None if self.rho is None else self.rho.copy(),
            self.weight_std,
            self.bias_std,
            None if self.chol_in is None else self.chol_in.copy(),
            None if self.chol_out is None else self.chol_out.copy(),
        )

    def cholesky_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """(L_in, L_out); cached, so treat the raw factors as immutable."""
        if self.family is not Family.FC:
            raise FamilyMismatch("only FC posteriors carry Cholesky factors")
        cache = self.__dict__.get("_chol_cache")
        if cache is None or cache[0] is not self.chol_in or cache[1] is not self.chol_out:
            shape = self.shape
            cache = (
                self.chol_in,
                self.chol_out,
                raw_to_chol(self.chol_in, shape.n_input_block),
                raw_to_chol(self.chol_out, shape.n_output_block),
            )
            self.__dict__["_chol_cache"] = cache
        return cache[2], cache[3]

    def marginal_stds(self) -> ParamPoint:
        """Per-weight marginal standard deviations (log_noise_std slot is 0)."""
        p = self.mean
        if self.family is Family.MF:
            r = self.rho
            return ParamPoint(np.exp(r.W), np.exp(r.b_w), np.exp(r.V), math.exp(r.b_v), 0.0)
        if self.family is Family.WN:
            return ParamPoint(
                np.full_like(p.W, self.weight_std),
                np.full_like(p.b_w, self.bias_std),
                np.full_like(p.V, self.weight_std),
                self.bias_std,
                0.0,
            )
        if self.family is Family.FC:
            l_in, l_out = self.cholesky_factors()
            return ParamPoint.from_blocks(
                self.shape, np.sqrt(np.sum(l_in**2, axis=1)), np.sqrt(np.sum(l_out**2, axis=1))
            )
        return ParamPoint.zeros(self.shape)

    # Flat parameter dictionaries, the currency of the optimizer.

    def params(self) -> dict[str, np.ndarray]:
        out = {k: np.array(getattr(self.mean, k), dtype=np.float64) for k in WEIGHT_KEYS}
        out["log_noise_std"] = np.array(self.mean.log_noise_std)
        if self.family is Family.MF:
            for k in WEIGHT_KEYS:
                out["rho_" + k] = np.array(getattr(self.rho, k), dtype=np.float64)
        elif self.family is Family.FC:
            out["chol_in"] = self.chol_in.copy()
            out["chol_out"] = self.chol_out.copy()
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "VariationalPosterior":
        mean = ParamPoint(
            params["W"], params["b_w"], params["V"], float(params["b_v"]), float(params["log_noise_std"])
        )
        q = VariationalPosterior(self.family, mean, weight_std=self.weight_std, bias_std=self.bias_std)
        if self.family is Family.MF:
            q.rho = ParamPoint(
                params["rho_W"], params["rho_b_w"], params["rho_V"], float(params["rho_b_v"]), 0.0
            )
        elif self.family is Family.FC:
            q.chol_in = np.asarray(params["chol_in"], dtype=np.float64)
            q.chol_out = np.asarray(params["chol_out"], dtype=np.float64)
        return q

    # JSON snapshots

    def to_dict(self) -> dict:
        d = {
            "family": self.family.value,
            "shape": {"input_dim": self.shape.input_dim, "hidden_units": self.shape.hidden_units},
            "params": {k: np.asarray(v).tolist() for k, v in self.params().items()},
        }
        if self.family is Family.WN:
            d["weight_std"] = self.weight_std
            d["bias_std"] = self.bias_std
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalPosterior":
        family = Family.parse(d["family"])
        shape = NetworkShape(**d["shape"])
        params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
        template = cls(family, ParamPoint.zeros(shape), weight_std=d.get("weight_std"), bias_std=d.get("bias_std"))
        return template.with_params(params)


@dataclass(frozen=True)
class VfeEstimate:
    expected_nll: float
    kl: float
    n_mc: int

    @property
    def total(self) -> float:
        return self.expected_nll + self.kl


_TRIL: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def tril_layout(k: int):
    """Flat indices of the packed lower triangle of a k x k matrix.

    Returns (flat index of each packed entry, packed position of each
    diagonal entry, flat index of each diagonal entry).
    """
    layout = _TRIL.get(k)
    if layout is None:
        rows, cols = np.tril_indices(k)
        layout = _TRIL[k] = (rows * k + cols, np.flatnonzero(rows == cols), np.arange(k) * (k + 1))
    return layout


def raw_to_chol(raw: np.ndarray, k: int) -> np.ndarray:
    """Unpack a raw factor: strict lower entries as-is, diagonal exponentiated."""
    flat, diag, flat_diag = tril_layout(k)
    L = np.zeros(k * k)
    np.put(L, flat, raw)
    np.put(L, flat_diag, np.exp(raw[diag]))
    return L.reshape(k, k)


def chol_to_raw(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    d = np.diag(L)
    if np.any(d <= 0):
        raise NonPositiveScale("Cholesky factor needs a positive diagonal")
    raw = pack_lower(L)
    raw[tril_layout(L.shape[0])[1]] = np.log(d)
    return raw


def pack_lower(M: np.ndarray) -> np.ndarray:
    return np.take(M, tril_layout(M.shape[0])[0])


def init_posterior(
    family,
    shape: NetworkShape,
    prior: Prior,
    rng: RngState,
    sigma_init: float = 1e-4,
    weight_std: float = 0.1,
    bias_std: float = 0.1,
    log_noise_std: float = 0.0,
) -> VariationalPosterior:
    """Means ~ N(0, 1/fan_in) per layer; every learned std starts at ``sigma_init``.

    ``prior`` is accepted for interface symmetry; initialization does not
    depend on it.
    """
    family = Family.parse(family)
    if not sigma_init > 0:
        raise InvalidSigmaInit(f"sigma_init must be positive, got {sigma_init}")
    h, d = shape.hidden_units, shape.input_dim
    g = rng.split("init")
    s_in, s_out = 1.0 / math.sqrt(d), 1.0 / math.sqrt(h)
    mean = ParamPoint(
        s_in * g.normal((h, d)),
        s_in * g.normal(h),
        s_out * g.normal(h),
        s_out * float(g.normal(1)[0]),
        log_noise_std,
    )
    q = VariationalPosterior(family, mean)
    if family is Family.MF:
        r = math.log(sigma_init)
        q.rho = ParamPoint(np.full((h, d), r), np.full(h, r), np.full(h, r), r, 0.0)
    elif family is Family.WN:
        q.weight_std, q.bias_std = float(weight_std), float(bias_std)
    elif family is Family.FC:
        q.chol_in = chol_to_raw(sigma_init * np.eye(shape.n_input_block))
        q.chol_out = chol_to_raw(sigma_init * np.eye(shape.n_output_block))
    return q


def point_posterior(family, mean: ParamPoint) -> VariationalPosterior:
    family = Family.parse(family)
    if not family.is_point:
        raise FamilyMismatch(f"{family.value} is not a point family")
    return VariationalPosterior(family, mean.copy())


def sample_params(q: VariationalPosterior, rng: RngState) -> ParamPoint:
    """One draw theta ~ q; point families return their point."""
    if q.family.is_point:
        return q.mean.copy()
    shape = q.shape
    if q.family is Family.FC:
        l_in, l_out = q.cholesky_factors()
        e_in = rng.normal(shape.n_input_block)
        e_out = rng.normal(shape.n_output_block)
        return ParamPoint.from_blocks(
            shape,
            q.mean.input_block() + l_in @ e_in,
            q.mean.output_block() + l_out @ e_out,
            q.mean.log_noise_std,
        )
    s = q.marginal_stds()
    m = q.mean
    return ParamPoint(
        m.W + s.W * rng.normal(m.W.shape),
        m.b_w + s.b_w * rng.normal(m.b_w.shape),
        m.V + s.V * rng.normal(m.V.shape),
        m.b_v + s.b_v * float(rng.normal(1)[0]),
        m.log_noise_std,
    )


def local_reparam_layer(mu_W, sigma_W, mu_b, sigma_b, x, rng: RngState | None = None, eps=None):
    """Sample pre-activations a = W x + b directly from their Gaussian.

    ``x`` is one input (D,) or a batch (N, D); each unit and each row gets
    independent noise. Pass ``eps`` to freeze the noise.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x @ np.asarray(mu_W).T + mu_b
    var = (x * x) @ (np.asarray(sigma_W) ** 2).T + np.asarray(sigma_b) ** 2
    if eps is None:
        eps = rng.normal(mean.shape)
    return mean + np.sqrt(var) * eps


def kl_diag_gauss(mu, sigma, prior_std):
    """KL(N(mu, sigma^2) || N(0, prior_std^2)), elementwise."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or not np.all(np.asarray(prior_std) > 0):
        raise NonPositiveScale("KL needs positive scales")
    mu = np.asarray(mu, dtype=np.float64)
    out = np.log(prior_std / sigma) + (sigma * sigma + mu * mu) / (2.0 * prior_std**2) - 0.5
    return out if np.ndim(out) else float(out)


def kl_full_gauss(mu, L, prior_std: float) -> float:
    """KL(N(mu, L L^T) || N(0, prior_std^2 I))."""
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    d = np.diag(L)
    if np.any(d <= 0) or prior_std <= 0:
        raise NonPositiveScale("KL needs a positive Cholesky diagonal and prior std")
    k = mu.shape[0]
    # scaled by the prior std first, so q = prior gives exactly zero
    Ls, ms = L / prior_std, mu / prior_std
    return float(0.5 * (np.vdot(Ls, Ls) + ms @ ms - k) + np.sum(np.log(prior_std / d)))


def kl_term(q: VariationalPosterior, prior: Prior) -> float:
    """Closed-form KL(q || prior) summed over all weights and biases."""
    if q.family.is_point:
        raise FamilyMismatch(f"{q.family.value} has no KL term")
    if q.family is Family.FC:
        l_in, l_out = q.cholesky_factors()
        return kl_full_gauss(q.mean.input_block(), l_in, prior.std) + kl_full_gauss(
            q.mean.output_block(), l_out, prior.std
        )
    s = q.marginal_stds()
    return float(
        sum(np.sum(kl_diag_gauss(getattr(q.mean, k), getattr(s, k), prior.std)) for k in WEIGHT_KEYS)
    )


def kl_gradients(q: VariationalPosterior, prior: Prior) -> dict[str, np.ndarray]:
    s2 = prior.std**2
    grads = {k: np.asarray(getattr(q.mean, k), dtype=np.float64) / s2 for k in WEIGHT_KEYS}
    grads["log_noise_std"] = np.array(0.0)
    if q.family is Family.MF:
        for k in WEIGHT_KEYS:
            sig2 = np.exp(2.0 * np.asarray(getattr(q.rho, k), dtype=np.float64))
            grads["rho_" + k] = sig2 / s2 - 1.0
    elif q.family is Family.FC:
        for key, L in zip(("chol_in", "chol_out"), q.cholesky_factors()):
            g = pack_lower(L) / s2
            diag = np.diag(L)
            g[tril_layout(L.shape[0])[1]] = diag * diag / s2 - 1.0
            grads[key] = g
    return grads


# Monte Carlo noise. Sample s always comes from the child stream ("mc", s),
# so chunking or parallelizing over samples cannot change the result.


def draw_noise(q: VariationalPosterior, n_data: int, n_mc: int, rng: RngState, start: int = 0):
    shape = q.shape
    if q.family.is_diagonal:
        e_a = np.empty((n_mc, n_data, shape.hidden_units))
        e_f = np.empty((n_mc, n_data))
        for s in range(n_mc):
            g = rng.split("mc", start + s)
            e_a[s] = g.normal((n_data, shape.hidden_units))
            e_f[s] = g.normal(n_data)
        return e_a, e_f
    if q.family is Family.FC:
        e_in = np.empty((n_mc, shape.n_input_block))
        e_out = np.empty((n_mc, shape.n_output_block))
        for s in range(n_mc):
            g = rng.split("mc", start + s)
            e_in[s] = g.normal(shape.n_input_block)
            e_out[s] = g.normal(shape.n_output_block)
        return e_in, e_out
    raise FamilyMismatch(f"{q.family.value} has no sampling noise")


def _safe_half_over(num, s):
    """num / (2 s), zero where s == 0 (a point-mass pre-activation)."""
    out = np.zeros_like(num)
    np.divide(num, 2.0 * s, out=out, where=s > 0)
    return out


def _diag_nll(q: VariationalPosterior, X, y, noise, want_grad: bool):
    """Summed NLL over samples in ``noise`` for WN/MF via local reparameterization.

    Returns (sum over samples of per-sample NLL, gradient dict of that sum).
    """
    e_a, e_f = noise
    m = q.mean
    sd = q.marginal_stds()
    var_W, var_bw = sd.W**2, sd.b_w**2
    var_V, var_bv = sd.V**2, sd.b_v**2

    mu_a = X @ m.W.T + m.b_w
    X2 = X * X
    s_a = np.sqrt(X2 @ var_W.T + var_bw)
    h = np.tanh(mu_a + s_a * e_a)
    mean_f = h @ m.V + m.b_v
    s_f = np.sqrt((h * h) @ var_V + var_bv)
    f = mean_f + s_f * e_f
    nll, d_f, d_log_noise = gauss_nll_and_grad(y, f, m.log_noise_std)
    total = float(np.sum(nll))
    if not want_grad:
        return total, None

    d_mean_f = d_f
    d_var_f = _safe_half_over(d_f * e_f, s_f)
    grads = {
        "V": np.einsum("snh,sn->h", h, d_mean_f),
        "b_v": np.array(np.sum(d_mean_f)),
        "log_noise_std": np.array(np.sum(d_log_noise)),
    }
    d_var_V = np.einsum("snh,sn->h", h * h, d_var_f)
    d_var_bv = float(np.sum(d_var_f))
    dh = d_mean_f[..., None] * m.V + d_var_f[..., None] * (2.0 * h * var_V)
    da = dh * (1.0 - h * h)
    d_mu_a = da.sum(axis=0)
    d_var_a = _safe_half_over((da * e_a).sum(axis=0), s_a)
    grads["W"] = d_mu_a.T @ X
    grads["b_w"] = d_mu_a.sum(axis=0)
    if q.family is Family.MF:
        grads["rho_W"] = (d_var_a.T @ X2) * 2.0 * var_W
        grads["rho_b_w"] = d_var_a.sum(axis=0) * 2.0 * var_bw
        grads["rho_V"] = d_var_V * 2.0 * var_V
        grads["rho_b_v"] = np.array(d_var_bv * 2.0 * var_bv)
    return total, grads


def _fc_nll(q: VariationalPosterior, X, y, noise, want_grad: bool):
    e_in, e_out = noise
    shape = q.shape
    l_in, l_out = q.cholesky_factors()
    mu_in, mu_out = q.mean.input_block(), q.mean.output_block()
    th_in = mu_in + e_in @ l_in.T
    th_out = mu_out + e_out @ l_out.T
    total = 0.0
    g_in = np.zeros_like(th_in)
    g_out = np.zeros_like(th_out)
    d_log_noise = 0.0
    for s in range(th_in.shape[0]):
        p = ParamPoint.from_blocks(shape, th_in[s], th_out[s], q.mean.log_noise_std)
        loss, g = point_gradients(p, X, y)
        total += loss
        g_in[s] = g.input_block()
        g_out[s] = g.output_block()
        d_log_noise += g.log_noise_std
    if not want_grad:
        return total, None
    gm = ParamPoint.from_blocks(shape, g_in.sum(axis=0), g_out.sum(axis=0))
    grads = {k: np.asarray(getattr(gm, k), dtype=np.float64) for k in WEIGHT_KEYS}
    grads["log_noise_std"] = np.array(d_log_noise)
    for key, G, E, L in (("chol_in", g_in, e_in, l_in), ("chol_out", g_out, e_out, l_out)):
        full = G.T @ E
        dL = pack_lower(full)
        dL[tril_layout(L.shape[0])[1]] *= np.diag(L)
        grads[key] = dL
    return total, grads


def expected_nll_with_noise(q, X, y, noise, want_grad: bool = True):
    """MC-averaged expected NLL (and gradients) for frozen noise."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n_mc = noise[0].shape[0]
    fn = _fc_nll if q.family is Family.FC else _diag_nll
    total, grads = fn(q, X, y, noise, want_grad)
    if grads is not None:
        grads = {k: v / n_mc for k, v in grads.items()}
    return total / n_mc, grads


def _check_vfe_family(q):
    if q.family.is_point:
        raise FamilyMismatch(f"the free energy is not defined for {q.family.value}")


def vfe_estimate(q, prior: Prior, X, y, n_mc: int, rng: RngState) -> VfeEstimate:
    _check_vfe_family(q)
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    acc = 0.0
    for start in range(0, n_mc, MC_CHUNK):
        m = min(MC_CHUNK, n_mc - start)
        noise = draw_noise(q, X.shape[0], m, rng, start)
        part, _ = expected_nll_with_noise(q, X, y, noise, want_grad=False)
        acc += part * m
    return VfeEstimate(acc / n_mc, kl_term(q, prior), n_mc)


def vfe_with_noise(q, prior: Prior, X, y, noise):
    """Free energy and its gradients for a fixed draw of MC noise."""
    _check_vfe_family(q)
    enll, grads = expected_nll_with_noise(q, X, y, noise, want_grad=True)
    kg = kl_gradients(q, prior)
    for k, v in kg.items():
        if k in grads:
            grads[k] = grads[k] + v
    return VfeEstimate(enll, kl_term(q, prior), noise[0].shape[0]), grads


def vfe_gradients(q, prior: Prior, X, y, n_mc: int, rng: RngState):
    """Reparameterization gradients of the n_mc-sample free energy estimate.

    Returns ``(VfeEstimate, grads)``; ``grads`` is keyed like ``q.params()``.
    WN gets gradients for means and log_noise_std only.
    """
    _check_vfe_family(q)
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return vfe_with_noise(q, prior, X, y, draw_noise(q, X.shape[0], n_mc, rng))
