import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from helpers import multi_group_binomial, two_group_data
from ipwcrit.data import DataError, Dataset, ModelFamily
from ipwcrit.nuisance import (_mnl_loglik, clip_probs, cond_loglik, cond_loglik_cross_grad_gamma_beta,
                              cond_loglik_grad_beta, cond_loglik_hess_beta, fit_outcome_nuisance,
                              fit_propensity, make_oracle, propensity_score_derivatives)


def test_propensity_matches_generic_optimizer():
    ds = multi_group_binomial(n=200, H=3, seed=4)
    fit = fit_propensity(ds)
    T = ds.indicators()
    res = minimize(lambda a: -_mnl_loglik(a, ds.z, T, 3), np.zeros(2), method="BFGS",
                   options={"gtol": 1e-9})
    np.testing.assert_allclose(fit.alpha.ravel(), res.x, atol=1e-5)
    assert fit.converged and not fit.separated


def test_propensity_score_and_hessian_finite_difference():
    ds = multi_group_binomial(n=30, H=3, seed=2)
    fit = fit_propensity(ds)
    score, hess = propensity_score_derivatives(fit, ds.z)
    a0 = fit.alpha.ravel()
    h = 1e-6
    logp = lambda a: np.log(type(fit)(a.reshape(fit.alpha.shape), 3).raw_probs(ds.z))
    for k in range(a0.size):
        da = np.zeros_like(a0)
        da[k] = h
        fd = (logp(a0 + da) - logp(a0 - da)) / (2 * h)
        np.testing.assert_allclose(score[:, :, k], fd, rtol=1e-5, atol=1e-8)
        fd2 = (score_at(fit, a0 + da, ds) - score_at(fit, a0 - da, ds)) / (2 * h)
        np.testing.assert_allclose(hess[:, :, k], fd2, rtol=1e-5, atol=1e-7)


def score_at(fit, a, ds):
    f = type(fit)(a.reshape(fit.alpha.shape), fit.h_count)
    s, _ = propensity_score_derivatives(f, ds.z)
    # the Hessian is the same for every observed group, so group 1's score suffices
    return s[:, 0, :]


def test_propensity_needs_confounder_and_all_groups():
    ds = Dataset.build([0.0, 1.0], [1, 2], [[0.0], [1.0]], np.zeros((2, 0)), 2)
    with pytest.raises(DataError, match="confounder"):
        fit_propensity(ds)
    ds = Dataset.build([0.0, 1.0], [1, 1], [[0.0], [1.0]], [[1.0], [2.0]], 3)
    with pytest.raises(DataError, match="empty group"):
        fit_propensity(ds)


def test_propensity_separation_warns():
    z = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    ds = Dataset.build(np.zeros(4), [1, 1, 2, 2], np.zeros((4, 1)), z, 2)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        fit = fit_propensity(ds)
    assert fit.separated and any("separation" in str(x.message) for x in w)


@given(st.integers(0, 1000), st.integers(2, 5))
def test_clip_probs_rows_valid(seed, H):
    rng = np.random.default_rng(seed)
    e = rng.dirichlet(np.full(H, 0.05), size=20)
    c = clip_probs(e)
    np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(c >= 1e-3 - 1e-12)


@pytest.mark.parametrize("pooled", [True, False])
def test_outcome_binomial_matches_generic_optimizer(pooled):
    ds = multi_group_binomial(n=150, H=2, seed=1)
    fit = fit_outcome_nuisance(ds, ModelFamily.binomial(ds.m), pooled=pooled)
    rows = fit.design(ds.z)[np.arange(ds.n), ds.t - 1]
    nll = lambda g: -(ds.y * (rows @ g) - ds.m * np.logaddexp(0, rows @ g)).sum()
    res = minimize(nll, np.zeros(rows.shape[1]), method="BFGS", options={"gtol": 1e-9})
    np.testing.assert_allclose(fit.gamma, res.x, atol=1e-5)


def test_outcome_gaussian_is_least_squares():
    ds, _ = two_group_data(seed=3)
    fit = fit_outcome_nuisance(ds, ModelFamily.gaussian(1.0))
    g, *_ = np.linalg.lstsq(ds.z, ds.y, rcond=None)
    np.testing.assert_allclose(fit.gamma, g)
    assert fit.sigma2 == pytest.approx(np.mean((ds.y - ds.z @ g) ** 2))


def test_outcome_neg_hessian_finite_difference():
    ds = multi_group_binomial(n=60, H=2, seed=5)
    fit = fit_outcome_nuisance(ds, ModelFamily.binomial(ds.m), pooled=False)
    T = ds.indicators()
    tot = lambda g: (T[:, :, None] * type(fit)(g, fit.tag, 2, False, 1.0, ds.m).score(ds)).sum(axis=(0, 1))
    h = 1e-6
    fd = np.column_stack([(tot(fit.gamma + h * e) - tot(fit.gamma - h * e)) / (2 * h)
                          for e in np.eye(fit.gamma.size)])
    np.testing.assert_allclose(-fit.neg_hessian(ds), fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("fam", [ModelFamily.binomial(3), ModelFamily.gaussian(1.7)], ids=["bin", "gauss"])
def test_cond_loglik_derivatives(fam):
    ds = multi_group_binomial(n=20, H=2, m=3, seed=6)
    fit = fit_outcome_nuisance(ds, fam if fam.tag == "binomial_logit" else ModelFamily.gaussian(1.0))
    rng = np.random.default_rng(0)
    design = rng.standard_normal((ds.n, 2, 3))
    o = make_oracle(fit, fam, ds, design, 4, 1)
    beta = rng.standard_normal(3) * 0.3
    f = lambda b: cond_loglik(o, float(o.x @ b))
    h = 1e-6
    E = np.eye(3)
    g = np.array([(f(beta + h * e) - f(beta - h * e)) / (2 * h) for e in E])
    np.testing.assert_allclose(cond_loglik_grad_beta(o, beta), g, rtol=1e-6, atol=1e-8)
    Hfd = np.column_stack([(cond_loglik_grad_beta(o, beta + h * e) - cond_loglik_grad_beta(o, beta - h * e))
                           / (2 * h) for e in E])
    np.testing.assert_allclose(cond_loglik_hess_beta(o, beta), Hfd, rtol=1e-6, atol=1e-8)
    # cross derivative: perturb gamma, recompute the oracle, difference the beta gradient
    r = fit.gamma.size
    cross = np.zeros((r, 3))
    for k in range(r):
        dg = np.zeros(r)
        dg[k] = h
        up = make_oracle(type(fit)(fit.gamma + dg, fit.tag, 2, fit.pooled, fit.sigma2, fit.m), fam, ds, design, 4, 1)
        dn = make_oracle(type(fit)(fit.gamma - dg, fit.tag, 2, fit.pooled, fit.sigma2, fit.m), fam, ds, design, 4, 1)
        cross[k] = (cond_loglik_grad_beta(up, beta) - cond_loglik_grad_beta(dn, beta)) / (2 * h)
    np.testing.assert_allclose(cond_loglik_cross_grad_gamma_beta(o, beta), cross, rtol=1e-5, atol=1e-8)


def test_clip_probs_leaves_interior_rows():
    e = np.array([[0.2, 0.3, 0.5], [0.0, 0.0, 1.0]])
    c = clip_probs(e)
    np.testing.assert_array_equal(c[0], e[0])
    assert c[1].min() == pytest.approx(1e-3) and c[1].max() <= 1 - 1e-3
