import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import central_diff, rel_err
from overprune.network import NetworkShape, ParamPoint, neg_log_lik
from overprune.numerics import RngState
from overprune.posterior import (
    Family,
    FamilyMismatch,
    InvalidSigmaInit,
    NonPositiveScale,
    Prior,
    VariationalPosterior,
    chol_to_raw,
    draw_noise,
    expected_nll_with_noise,
    init_posterior,
    kl_diag_gauss,
    kl_full_gauss,
    kl_term,
    local_reparam_layer,
    point_posterior,
    raw_to_chol,
    sample_params,
    vfe_estimate,
    vfe_gradients,
    vfe_with_noise,
)


def random_q(family, d, h, rng, spread=True):
    """A posterior with random means and scales; seeds via numpy, not RngState."""
    shape = NetworkShape(d, h)
    q = init_posterior(family, shape, Prior(1.0), RngState(int(rng.integers(1 << 30))))
    q.mean.log_noise_std = float(rng.normal(scale=0.3))
    if family is Family.MF:
        q.rho = ParamPoint(
            rng.uniform(-3, 0, (h, d)), rng.uniform(-3, 0, h), rng.uniform(-3, 0, h), float(rng.uniform(-3, 0)), 0.0
        )
    elif family is Family.WN:
        q.weight_std, q.bias_std = float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.05, 0.5))
    elif family is Family.FC:
        for name, k in (("chol_in", shape.n_input_block), ("chol_out", shape.n_output_block)):
            L = np.tril(rng.normal(scale=0.1, size=(k, k)), -1) + np.diag(rng.uniform(0.05, 0.4, k))
            setattr(q, name, chol_to_raw(L))
    return q


# KL divergences


def kl_by_quadrature(mu, sigma, prior_std):
    q = stats.norm(mu, sigma)
    p = stats.norm(0.0, prior_std)

    def integrand(z):
        w = mu + sigma * z
        return stats.norm.pdf(z) * (q.logpdf(w) - p.logpdf(w))

    return integrate.quad(integrand, -12, 12, limit=200)[0]


def test_kl_diag_examples():
    assert kl_diag_gauss(0.0, 1.0, 1.0) == 0.0
    assert kl_diag_gauss(1.0, 1.0, 1.0) == pytest.approx(0.5, abs=1e-15)
    v = kl_diag_gauss(0.0, 1e-4, 1.0)
    assert v == pytest.approx(8.710340, abs=1e-6)
    assert v == pytest.approx(kl_by_quadrature(0.0, 1e-4, 1.0), abs=1e-8)


@pytest.mark.parametrize("mu,sigma,prior_std", [(0.3, 0.2, 1.0), (-1.5, 2.0, 0.5), (0.0, 0.01, 3.0)])
def test_kl_diag_matches_quadrature(mu, sigma, prior_std):
    assert kl_diag_gauss(mu, sigma, prior_std) == pytest.approx(kl_by_quadrature(mu, sigma, prior_std), abs=1e-8)


def test_kl_rejects_nonpositive_scale():
    with pytest.raises(NonPositiveScale):
        kl_diag_gauss(0.0, 0.0, 1.0)
    with pytest.raises(NonPositiveScale):
        kl_full_gauss(np.zeros(2), np.diag([1.0, 0.0]), 1.0)


@given(st.floats(-5, 5), st.floats(1e-3, 10), st.floats(1e-2, 10))
def test_kl_diag_nonnegative(mu, sigma, prior_std):
    assert kl_diag_gauss(mu, sigma, prior_std) >= -1e-12


def test_kl_full_reduces_to_diagonal():
    rng = np.random.default_rng(0)
    mu, s = rng.normal(size=4), rng.uniform(0.1, 2.0, 4)
    assert kl_full_gauss(mu, np.diag(s), 0.7) == pytest.approx(float(np.sum(kl_diag_gauss(mu, s, 0.7))), rel=1e-12)
    assert kl_full_gauss(np.zeros(3), 2.0 * np.eye(3), 2.0) == pytest.approx(0.0, abs=1e-14)


def test_kl_full_matches_scipy_logdet_formula():
    rng = np.random.default_rng(1)
    k = 5
    L = np.tril(rng.normal(size=(k, k)), -1) + np.diag(rng.uniform(0.5, 1.5, k))
    mu = rng.normal(size=k)
    S = L @ L.T
    s2 = 0.8**2
    ref = 0.5 * (np.trace(S) / s2 + mu @ mu / s2 - k + k * math.log(s2) - np.linalg.slogdet(S)[1])
    assert kl_full_gauss(mu, L, 0.8) == pytest.approx(ref, rel=1e-12)


# Packed Cholesky storage


def test_raw_chol_roundtrip():
    rng = np.random.default_rng(2)
    L = np.tril(rng.normal(size=(4, 4)), -1) + np.diag(rng.uniform(0.1, 2, 4))
    np.testing.assert_allclose(raw_to_chol(chol_to_raw(L), 4), L, rtol=1e-14, atol=1e-15)
    with pytest.raises(NonPositiveScale):
        chol_to_raw(np.diag([1.0, -1.0]))


# Initialization and containers


@pytest.mark.parametrize("family", [Family.MF, Family.FC])
def test_init_sigma(family):
    q = init_posterior(family, NetworkShape(3, 5), Prior(1.0), RngState(0))
    s = q.marginal_stds()
    for arr in (s.W, s.b_w, s.V):
        np.testing.assert_allclose(arr, 1e-4, rtol=1e-12)
    assert s.b_v == pytest.approx(1e-4)


def test_init_invalid_sigma():
    with pytest.raises(InvalidSigmaInit):
        init_posterior(Family.MF, NetworkShape(1, 2), Prior(1.0), RngState(0), sigma_init=0.0)


def test_init_deterministic():
    a = init_posterior(Family.MF, NetworkShape(2, 3), Prior(1.0), RngState(5))
    b = init_posterior(Family.MF, NetworkShape(2, 3), Prior(1.0), RngState(5))
    np.testing.assert_array_equal(a.mean.to_vector(), b.mean.to_vector())


def test_family_parse():
    assert Family.parse("mf") is Family.MF
    assert Family.parse(Family.FC) is Family.FC
    with pytest.raises(ValueError):
        Family.parse("xx")


@pytest.mark.parametrize("family", list(Family))
def test_dict_roundtrip(family):
    rng = np.random.default_rng(3)
    if family.is_point:
        q = point_posterior(family, ParamPoint(rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=2), 0.3))
    else:
        q = random_q(family, 2, 2, rng)
    r = VariationalPosterior.from_dict(q.to_dict())
    assert r.family is q.family
    for k, v in q.params().items():
        np.testing.assert_array_equal(r.params()[k], v)


def test_point_families_have_no_vfe():
    q = point_posterior(Family.ES, ParamPoint.zeros(NetworkShape(1, 2)))
    with pytest.raises(FamilyMismatch):
        vfe_estimate(q, Prior(1.0), np.zeros((2, 1)), np.zeros(2), 1, RngState(0))
    with pytest.raises(FamilyMismatch):
        kl_term(q, Prior(1.0))


def test_sample_params_point_family():
    p = ParamPoint(np.ones((2, 1)), np.zeros(2), np.ones(2), 0.5)
    q = point_posterior("MAP", p)
    np.testing.assert_array_equal(sample_params(q, RngState(0)).to_vector(), p.to_vector())


def test_fc_sample_covariance():
    rng = np.random.default_rng(4)
    q = random_q(Family.FC, 1, 2, rng)
    draws = np.stack([sample_params(q, RngState(9).split("s", i)).input_block() for i in range(20000)])
    L, _ = q.cholesky_factors()
    np.testing.assert_allclose(np.cov(draws.T), L @ L.T, atol=0.01)


# Nesting of the families


def test_wn_equals_mf_with_shared_std():
    rng = np.random.default_rng(5)
    wn = random_q(Family.WN, 2, 3, rng)
    wn.bias_std = wn.weight_std
    r = math.log(wn.weight_std)
    mf = VariationalPosterior(Family.MF, wn.mean.copy(), ParamPoint(np.full((3, 2), r), np.full(3, r), np.full(3, r), r))
    X, y = rng.normal(size=(7, 2)), rng.normal(size=7)
    noise = draw_noise(mf, 7, 4, RngState(0))
    assert kl_term(wn, Prior(1.3)) == pytest.approx(kl_term(mf, Prior(1.3)), rel=1e-12)
    a, _ = expected_nll_with_noise(wn, X, y, noise)
    b, _ = expected_nll_with_noise(mf, X, y, noise)
    assert a == pytest.approx(b, rel=1e-12)


def test_fc_with_diagonal_factor_matches_mf_kl():
    rng = np.random.default_rng(6)
    mf = random_q(Family.MF, 2, 3, rng)
    s = mf.marginal_stds()
    fc = VariationalPosterior(
        Family.FC,
        mf.mean.copy(),
        chol_in=chol_to_raw(np.diag(s.input_block())),
        chol_out=chol_to_raw(np.diag(s.output_block())),
    )
    assert kl_term(fc, Prior(0.9)) == pytest.approx(kl_term(mf, Prior(0.9)), rel=1e-12)


@pytest.mark.parametrize("family", [Family.MF, Family.FC])
def test_tiny_variance_recovers_point_nll(family):
    rng = np.random.default_rng(7)
    q = init_posterior(family, NetworkShape(2, 4), Prior(1.0), RngState(1), sigma_init=1e-9)
    X, y = rng.normal(size=(9, 2)), rng.normal(size=9)
    est = vfe_estimate(q, Prior(1.0), X, y, 3, RngState(2))
    assert est.expected_nll == pytest.approx(neg_log_lik(q.mean, X, y), rel=1e-6)


# Local reparameterization


def test_local_reparam_frozen_noise():
    mu_W, sig_W = np.array([[1.0, -2.0]]), np.array([[0.5, 0.1]])
    x = np.array([2.0, 1.0])
    a = local_reparam_layer(mu_W, sig_W, np.array([0.5]), np.array([0.3]), x, eps=np.array([1.0]))
    expected = (2.0 - 2.0 + 0.5) + math.sqrt(4 * 0.25 + 0.01 + 0.09)
    np.testing.assert_allclose(a, [expected])


def test_local_reparam_zero_variance_is_deterministic():
    mu_W = np.array([[1.0, 2.0], [0.0, -1.0]])
    x = np.array([0.5, 0.25])
    a = local_reparam_layer(mu_W, np.zeros((2, 2)), np.zeros(2), np.zeros(2), x, RngState(0))
    np.testing.assert_allclose(a, mu_W @ x)


def test_vfe_estimate_chunking_invariant():
    rng = np.random.default_rng(8)
    q = random_q(Family.MF, 2, 3, rng)
    X, y = rng.normal(size=(5, 2)), rng.normal(size=5)
    est = vfe_estimate(q, Prior(1.0), X, y, 150, RngState(3))
    direct, _ = expected_nll_with_noise(q, X, y, draw_noise(q, 5, 150, RngState(3)), want_grad=False)
    assert est.expected_nll == pytest.approx(direct, rel=1e-12)
    assert est.total == pytest.approx(est.expected_nll + est.kl)


@pytest.mark.parametrize("family", [Family.WN, Family.MF, Family.FC])
def test_expected_nll_unbiased_against_weight_sampling(family):
    # local reparameterization and weight-space sampling share one expectation
    rng = np.random.default_rng(9)
    q = random_q(family, 2, 3, rng)
    X, y = rng.normal(size=(4, 2)), rng.normal(size=4)
    n = 20000
    per = np.array([neg_log_lik(sample_params(q, RngState(11).split("w", i)), X, y) for i in range(n)])
    est = vfe_estimate(q, Prior(1.0), X, y, n, RngState(12))
    se = per.std(ddof=1) / math.sqrt(n)
    assert abs(est.expected_nll - per.mean()) < 4 * math.sqrt(2) * se


def test_wn_gradients_exclude_scales():
    rng = np.random.default_rng(10)
    q = random_q(Family.WN, 2, 3, rng)
    _, g = vfe_gradients(q, Prior(1.0), rng.normal(size=(4, 2)), rng.normal(size=4), 1, RngState(0))
    assert set(g) == {"W", "b_w", "V", "b_v", "log_noise_std"}


# Finite-difference oracle for the free energy with frozen noise


def vfe_fd_error(q, prior, X, y, noise) -> float:
    _, grads = vfe_with_noise(q, prior, X, y, noise)
    params = q.params()
    fd_all, an_all = [], []
    for key in grads:
        def f(val, key=key):
            p = dict(params)
            p[key] = val
            return vfe_with_noise(q.with_params(p), prior, X, y, noise)[0].total

        fd_all.append(central_diff(f, params[key]).ravel())
        an_all.append(np.ravel(grads[key]))
    return rel_err(np.concatenate(fd_all), np.concatenate(an_all))


@pytest.mark.parametrize("family", [Family.WN, Family.MF, Family.FC])
def test_vfe_gradients_finite_differences(family):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        d, h = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        n = int(rng.integers(1, 17))
        q = random_q(family, d, h, rng)
        prior = Prior(float(rng.uniform(0.3, 3.0)))
        X, y = rng.normal(size=(n, d)), rng.normal(size=n)
        noise = draw_noise(q, n, int(rng.integers(1, 4)), RngState(seed))
        worst = max(worst, vfe_fd_error(q, prior, X, y, noise))
    assert worst < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_term_nonnegative_and_zero_at_prior(seed):
    rng = np.random.default_rng(seed)
    q = random_q(Family.MF, 2, 3, rng)
    assert kl_term(q, Prior(1.0)) >= 0
    shape = q.shape
    at_prior = VariationalPosterior(
        Family.MF, ParamPoint.zeros(shape), ParamPoint(np.zeros((3, 2)), np.zeros(3), np.zeros(3), 0.0)
    )
    assert kl_term(at_prior, Prior(1.0)) == 0.0
