import types

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import CONTRAST, multi_group_binomial, two_group_data
from ipwcrit.criteria import (NoiseSpec, build_matrices, dr_aic, dric, glm_gof, group_R, ipcp_enet,
                              ipcp_group, ipcp_lasso, ipic, ipic_nonconvex, loglik, qicw,
                              resolve_sigma2)
from ipwcrit.data import ContrastSpec, DataError, Dataset, ModelFamily, PenaltySpec
from ipwcrit.estimators import (DrProblemSpec, IpwGaussianProblemSpec, dr_glm_fit, glm_design,
                                ipw_gaussian_fit, ipw_glm_fit, pseudo_outcomes)
from ipwcrit.nuisance import (KnownPropensity, OutcomeNuisanceFit, PropensityFit, cond_loglik,
                              fit_outcome_nuisance, fit_propensity, make_oracle,
                              propensity_score_derivatives)
from ipwcrit.solvers import WeightedLsqProblem, solve_group_lasso_lsq, solve_lasso_lsq

KNOWN1 = NoiseSpec(1.0)


def lasso_fit(ds, e, lam, contrast=CONTRAST, kind="lasso", lam2=0.0):
    pen = PenaltySpec.elastic_net(lam, lam2) if kind == "elastic_net" else PenaltySpec.lasso(lam)
    return ipw_gaussian_fit(IpwGaussianProblemSpec(ds, contrast, KnownPropensity(e), pen))


def single_group(n=30, p=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    y = x @ np.r_[1.0, -0.5, np.zeros(p - 2)] + rng.standard_normal(n)
    return Dataset.build(y, np.ones(n, int), x, rng.standard_normal((n, 1)), 1)


# ---- IPCp: direct arithmetic


def test_ipcp_hand_computable_toy():
    # n=3, p=2, H=2, e = 1/2 everywhere: sum_h c_h^2 / e_h = 2, so the trace is 2 p_hat
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    ds = Dataset.build([1.0, -2.0, 0.5], [1, 2, 1], x, [[0.0], [0.0], [0.0]], 2)
    e = np.full((3, 2), 0.5)
    fit = lasso_fit(ds, e, 1e-6)
    assert fit.active_size == 2
    rep = ipcp_lasso(fit, ds, CONTRAST, KnownPropensity(e), NoiseSpec(1.5))
    assert rep.penalty == pytest.approx(2 * 1.5 * 4, abs=1e-12)
    w = pseudo_outcomes(ds, CONTRAST, e)
    assert rep.gof == pytest.approx(((w - x @ fit.coef) ** 2).sum(), abs=1e-12)
    assert rep.total == rep.gof + rep.penalty


@pytest.mark.parametrize("seed", range(5))
def test_ipcp_matches_direct_matrix_arithmetic(seed):
    ds, e = two_group_data(n=25, p=4, seed=seed)
    fit = lasso_fit(ds, e, 5.0)
    A = list(fit.active)
    X2 = ds.x[:, A]
    a = 0.5 / e[:, 0] + 0.5 / e[:, 1]
    direct = 2 * 1.0 * np.trace(np.linalg.inv(X2.T @ X2) @ (X2.T @ np.diag(a) @ X2))
    assert ipcp_lasso(fit, ds, CONTRAST, KnownPropensity(e), KNOWN1).penalty == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_ipcp_penalty_is_divergence_of_fit(seed):
    # SURE: penalty / (2 sigma2) = sum_i a_i d(x_i' theta_hat)/d w_i, by finite differences
    ds, e = two_group_data(n=20, p=3, seed=seed)
    lam = 4.0
    w = pseudo_outcomes(ds, CONTRAST, e)
    a = 0.5 / e[:, 0] + 0.5 / e[:, 1]
    solve = lambda ww: solve_lasso_lsq(WeightedLsqProblem(ww, ds.x, PenaltySpec.lasso(lam)), tol=1e-14).coef
    h = 1e-6
    div = 0.0
    for i in range(ds.n):
        dw = np.zeros(ds.n)
        dw[i] = h
        div += a[i] * ds.x[i] @ (solve(w + dw) - solve(w - dw)) / (2 * h)
    fit = lasso_fit(ds, e, lam)
    rep = ipcp_lasso(fit, ds, CONTRAST, KnownPropensity(e), KNOWN1)
    assert rep.penalty == pytest.approx(2 * div, rel=1e-5)


def test_ipcp_enet_orthonormal_identity():
    n, lam2 = 16, 0.7
    x = np.linalg.qr(np.random.default_rng(0).standard_normal((n, 2)))[0] * np.sqrt(n)
    y = x @ [3.0, -2.0] + 0.1
    ds = Dataset.build(y, np.ones(n, int), x, np.zeros((n, 1)), 1)
    fit = lasso_fit(ds, np.ones((n, 1)), 0.1, ContrastSpec((1.0,)), "elastic_net", lam2)
    rep = ipcp_enet(fit, ds, ContrastSpec((1.0,)), KnownPropensity(np.ones((n, 1))), KNOWN1)
    assert fit.active_size == 2
    assert rep.penalty == pytest.approx(2 * 2 * n * (1 + lam2) / (n + lam2), rel=1e-10)


def test_ipcp_enet_large_lam2_trend():
    ds, e = two_group_data(n=20, p=2, seed=1)
    a = 0.5 / e[:, 0] + 0.5 / e[:, 1]
    for lam2 in (1e3, 1e5):
        fit = lasso_fit(ds, e, 1e-3, kind="elastic_net", lam2=lam2)
        X2 = ds.x[:, list(fit.active)]
        direct = 2 * np.trace(np.linalg.solve(X2.T @ X2 + lam2 * np.eye(X2.shape[1]),
                                              (1 + lam2) * (X2.T * a) @ X2))
        limit = 2 * (a[:, None] * X2 ** 2).sum() / lam2 * (1 + lam2)
        rep = ipcp_enet(fit, ds, CONTRAST, KnownPropensity(e), KNOWN1)
        assert rep.penalty == pytest.approx(direct, rel=1e-10)
        assert abs(rep.penalty - limit) / limit < 50.0 / lam2


def test_ipcp_empty_active_set():
    ds, e = two_group_data(seed=0)
    fit = lasso_fit(ds, e, 1e6)
    assert ipcp_lasso(fit, ds, CONTRAST, KnownPropensity(e), KNOWN1).penalty == 0.0


@given(st.integers(0, 10_000), st.floats(0.5, 10.0))
def test_ipcp_penalty_dominates_qicw(seed, lam):
    ds, e = two_group_data(n=25, p=4, seed=seed)
    fit = lasso_fit(ds, e, lam)
    rep = ipcp_lasso(fit, ds, CONTRAST, KnownPropensity(e), KNOWN1)
    assert rep.penalty >= 2 * fit.active_size - 1e-9


@given(st.integers(0, 10_000))
def test_ipcp_trace_invariant_to_column_order(seed):
    ds, e = two_group_data(n=25, p=4, seed=seed)
    perm = np.random.default_rng(seed).permutation(4)
    ds2 = Dataset.build(ds.y, ds.t, ds.x[:, perm], ds.z, 2)
    r1 = ipcp_lasso(lasso_fit(ds, e, 2.0), ds, CONTRAST, KnownPropensity(e), KNOWN1)
    r2 = ipcp_lasso(lasso_fit(ds2, e, 2.0), ds2, CONTRAST, KnownPropensity(e), KNOWN1)
    assert r1.penalty == pytest.approx(r2.penalty, rel=1e-9, abs=1e-9)


# ---- group lasso


def test_group_R_matches_solver_jacobian():
    rng = np.random.default_rng(3)
    n, H, lam = 15, 2, 3.0
    x = rng.standard_normal((n, 2))
    W = x @ np.array([[1.0, -0.8], [0.6, 0.4]]) + 0.3 * rng.standard_normal((n, H))
    fit_of = lambda WW: solve_group_lasso_lsq(
        [WeightedLsqProblem(WW[:, h], x, PenaltySpec.group_lasso(lam)) for h in range(H)], tol=1e-14).coef
    theta = fit_of(W)
    assert np.all(np.linalg.norm(theta, axis=1) > 0)
    G = 2 * x.T @ x
    R = group_R(theta, G / 2, lam)
    # d theta^[h] / d W_ih = (R^{-1})_{.h block} (X'X)^{-1} x_i
    Ginv = np.linalg.inv(x.T @ x)
    h = 1e-6
    for i in (0, 5):
        for g in range(H):
            dW = np.zeros_like(W)
            dW[i, g] = h
            fd = (fit_of(W + dW) - fit_of(W - dW)) / (2 * h)
            rhs = np.zeros(2 * H)
            rhs[g * 2:(g + 1) * 2] = Ginv @ x[i]
            analytic = np.linalg.solve(R, rhs)
            np.testing.assert_allclose(fd.T.ravel(), analytic, rtol=1e-5, atol=1e-8)


def test_ipcp_group_toy_direct_oracle():
    # p = 1, H = 2, n = 4: R is 2 x 2 and B_h is scalar
    x = np.array([[1.0], [2.0], [-1.0], [0.5]])
    y = np.array([2.0, 3.0, -1.0, 0.4])
    t = np.array([1, 2, 1, 2])
    e = np.array([[0.4, 0.6], [0.5, 0.5], [0.7, 0.3], [0.2, 0.8]])
    ds = Dataset.build(y, t, x, np.zeros((4, 1)), 2)
    pen = PenaltySpec.group_lasso(1.0)
    fit = ipw_gaussian_fit(IpwGaussianProblemSpec(ds, None, KnownPropensity(e), pen))
    th = fit.coef[0]
    nrm = np.linalg.norm(th)
    g = (x[:, 0] ** 2).sum()
    R = np.eye(2) + 0.5 / g * (np.eye(2) / nrm - np.outer(th, th) / nrm ** 3)
    B = np.array([(x[:, 0] ** 2 / e[:, h]).sum() / g for h in range(2)])
    Rinv = np.linalg.inv(R)
    direct = 2 * 1.0 * (Rinv[0, 0] * B[0] + Rinv[1, 1] * B[1])
    rep = ipcp_group(fit, ds, KnownPropensity(e), KNOWN1)
    assert rep.penalty == pytest.approx(direct, abs=1e-10)


def test_ipcp_group_lam0_unit_e():
    ds = single_group(n=20, p=3)
    H = 2
    ds2 = Dataset.build(ds.y, np.where(np.arange(20) % 2 == 0, 1, 2), ds.x, ds.z, H)
    e = np.full((20, 2), 0.5)
    fit = ipw_gaussian_fit(IpwGaussianProblemSpec(ds2, None, KnownPropensity(e), PenaltySpec.group_lasso(0.0)))
    rep = ipcp_group(fit, ds2, KnownPropensity(e), KNOWN1)
    # e = 1/2 doubles the identity trace per group
    assert rep.penalty == pytest.approx(2 * 3 * H * 2, rel=1e-9)


# ---- reduction identities (tolerance 1e-9)


@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_reduction_ipcp_unit_propensity(seed, lam):
    ds = single_group(seed=seed)
    one = np.ones((ds.n, 1))
    fit = lasso_fit(ds, one, lam, ContrastSpec((1.0,)))
    rep = ipcp_lasso(fit, ds, ContrastSpec((1.0,)), KnownPropensity(one), NoiseSpec(1.7))
    assert abs(rep.penalty - 2 * 1.7 * fit.active_size) <= 1e-9


@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_reduction_enet_lam2_zero(seed, lam):
    ds, e = two_group_data(n=25, p=4, seed=seed)
    f1 = lasso_fit(ds, e, lam)
    f2 = lasso_fit(ds, e, lam, kind="elastic_net", lam2=0.0)
    r1 = ipcp_lasso(f1, ds, CONTRAST, KnownPropensity(e), KNOWN1)
    r2 = ipcp_enet(f2, ds, CONTRAST, KnownPropensity(e), KNOWN1)
    assert abs(r1.total - r2.total) <= 1e-9 * max(1.0, abs(r1.total))


@given(st.integers(0, 10_000))
def test_reduction_group_single_group(seed):
    ds = single_group(seed=seed)
    e = np.ones((ds.n, 1))
    one = KnownPropensity(e)
    fg = ipw_gaussian_fit(IpwGaussianProblemSpec(ds, None, one, PenaltySpec.group_lasso(0.0)))
    fl = lasso_fit(ds, e, 0.0, ContrastSpec((1.0,)))
    rg = ipcp_group(fg, ds, one, KNOWN1)
    rl = ipcp_lasso(fl, ds, ContrastSpec((1.0,)), one, KNOWN1)
    assert abs(rg.penalty - rl.penalty) <= 1e-9
    assert abs(rg.gof - rl.gof) <= 1e-9 * max(1.0, rl.gof)


def _unit_glm(seed, family):
    rng = np.random.default_rng(seed)
    n = 40
    x = rng.standard_normal((n, 2))
    z = np.column_stack([np.ones(n), rng.standard_normal(n)])
    lin = x @ [0.7, -0.4] + 0.3 * z[:, 1]
    if family.tag == "binomial_logit":
        y = rng.binomial(family.m, 1 / (1 + np.exp(-lin)))
        ds = Dataset.build(y, np.ones(n, int), x, z, 1, m=family.m)
    else:
        ds = Dataset.build(lin + rng.standard_normal(n), np.ones(n, int), x, z, 1)
    return ds


@pytest.mark.parametrize("family", [ModelFamily.binomial(3), ModelFamily.gaussian(1.0)], ids=["bin", "gauss"])
@pytest.mark.parametrize("seed", range(3))
def test_reduction_dr_equals_ipw_when_weights_unit(family, seed):
    ds = _unit_glm(seed, family)
    prop = KnownPropensity(np.ones((ds.n, 1)))
    outcome = fit_outcome_nuisance(ds, family if family.tag != "gaussian" else ModelFamily.gaussian(1.0))
    pen = PenaltySpec.lasso(0.02)
    f_ipw = ipw_glm_fit(ds, family, prop, pen)
    f_dr = dr_glm_fit(DrProblemSpec(ds, family, prop, outcome, pen))
    np.testing.assert_allclose(f_dr.coef, f_ipw.coef, atol=1e-12)
    mi = build_matrices(f_ipw, ds, family, prop)
    md = build_matrices(f_ipw, ds, family, prop, outcome, mode="dr")
    base = ipic(f_ipw, mi, ds, prop, family)
    for rep in (dr_aic(f_ipw, md, ds, prop, family), dric(f_ipw, md, ds, prop, outcome, family)):
        assert abs(rep.total - base.total) <= 1e-9 * max(1.0, abs(base.total))
        assert abs(rep.penalty - base.penalty) <= 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_reduction_scad_l1_region_equals_ipic(seed):
    ds = multi_group_binomial(n=150, H=2, seed=seed)
    fam = ModelFamily.binomial(ds.m)
    prop = KnownPropensity(np.full((ds.n, 2), 0.5))
    from ipwcrit.estimators import ipw_glm_problem
    from ipwcrit.solvers import glm_lambda_max, solve_penalized_glm
    lmax = glm_lambda_max(ipw_glm_problem(ds, fam, prop, PenaltySpec.lasso(0.0)))
    # walk down from the shutoff until some coefficient enters, still inside |beta| <= lambda
    for lam in lmax * np.geomspace(0.99, 0.05, 40):
        fit = solve_penalized_glm(ipw_glm_problem(ds, fam, prop, PenaltySpec.scad(lam)), tol=1e-14)
        act = list(fit.active)
        if act:
            break
    assert act and np.all(np.abs(fit.coef[act]) <= lam)
    a = ipic(fit, build_matrices(fit, ds, fam, prop), ds, prop, fam)
    b = ipic_nonconvex(fit, ds, prop, fam)
    assert abs(a.penalty - b.penalty) <= 1e-9


def test_scad_flat_region_is_sandwich():
    ds = multi_group_binomial(n=300, H=2, seed=1)
    fam = ModelFamily.binomial(ds.m)
    prop = KnownPropensity(np.full((ds.n, 2), 0.5))
    from ipwcrit.estimators import ipw_glm_problem
    from ipwcrit.solvers import solve_penalized_glm
    pen = PenaltySpec.scad(0.01)
    fit = solve_penalized_glm(ipw_glm_problem(ds, fam, prop, pen), tol=1e-14)
    act = list(fit.active)
    assert np.all(np.abs(fit.coef[act]) > pen.a * pen.lam)
    m = build_matrices(fit, ds, fam, prop)
    J, S = m.J_hat[np.ix_(act, act)], m.score_outer[np.ix_(act, act)]
    g = m.score_mean[act]
    direct = 2 * np.trace(np.linalg.solve(J, S))
    # the flat region leaves only the score outer product (the mean score is ~0 at the optimum)
    assert np.max(np.abs(g)) < 1e-8
    assert ipic_nonconvex(fit, ds, prop, fam).penalty == pytest.approx(direct, rel=1e-8)


# ---- GLM criteria vs direct loops


def _loop_matrices(beta, ds, fam, e, outcome, prop_fit, lam_sign):
    """Per-sample loops over the displayed definitions; independent of the vectorized code."""
    D = glm_design(ds)
    n, H, d = D.shape
    phi = fam.dispersion
    J = np.zeros((d, d))
    Q = np.zeros((d, d))
    K = np.zeros((d, d))
    U = np.zeros((n, d))
    V = np.zeros((n, d))
    for i in range(n):
        for h in range(H):
            x = D[i, h]
            eta = x @ beta
            if fam.tag == "gaussian":
                mu, c = eta, 1.0
            else:
                p = 1 / (1 + np.exp(-eta))
                mu, c = fam.m * p, fam.m * p * (1 - p)
            a = (ds.t[i] == h + 1) / e[i, h]
            b = 1 - a
            u = (ds.y[i] - mu) / phi * x
            uE = (outcome.cond_mean(ds.z[i:i + 1])[0, h] - mu) / phi * x
            J += a * c / phi * np.outer(x, x) / n
            K += c / phi * np.outer(x, x) / n
            Q += a * a * np.outer(u, u) / n
            U[i] += a * u
            V[i] += a * u + b * uE
    Q -= np.outer(lam_sign, U.mean(axis=0))
    R = (U - lam_sign).T @ V / n
    return J, Q, R, K


def test_ipic_dr_matrices_toy_direct_oracle():
    ds = multi_group_binomial(n=12, H=2, m=3, seed=7)
    fam = ModelFamily.binomial(3)
    prop = fit_propensity(ds)
    outcome = fit_outcome_nuisance(ds, fam)
    fit = ipw_glm_fit(ds, fam, prop, PenaltySpec.lasso(0.05))
    m = build_matrices(fit, ds, fam, prop, outcome, mode="dr")
    J, Q, R, K = _loop_matrices(fit.coef, ds, fam, prop.probs(ds), outcome, prop,
                                fit.penalty.lam * fit.sign_vector())
    for a, b in ((m.J_hat, J), (m.Q_hat, Q), (m.R_hat, R), (m.K_hat, K)):
        np.testing.assert_allclose(a, b, atol=1e-10)
    act = list(fit.active)
    rep = ipic(fit, build_matrices(fit, ds, fam, prop), ds, prop, fam)
    if act:
        direct = 2 * np.trace(np.linalg.solve(J[np.ix_(act, act)], Q[np.ix_(act, act)]))
        assert rep.penalty == pytest.approx(direct, abs=1e-10)


def test_dric_full_chain_direct_oracle():
    ds = multi_group_binomial(n=40, H=2, m=3, seed=9)
    fam = ModelFamily.binomial(3)
    prop = fit_propensity(ds)
    outcome = fit_outcome_nuisance(ds, fam)
    fit = dr_glm_fit(DrProblemSpec(ds, fam, prop, outcome, PenaltySpec.lasso(0.02)))
    m = build_matrices(fit, ds, fam, prop, outcome, mode="dr")
    D = glm_design(ds)
    n, H, d = D.shape
    beta = fit.coef
    ls = fit.penalty.lam * fit.sign_vector()
    h = 1e-6

    def mean_aw(alpha):
        ee = PropensityFit(alpha.reshape(prop.alpha.shape), 2).probs(ds)
        out = np.zeros((H, d))
        for i in range(n):
            for g in range(H):
                muE = outcome.cond_mean(ds.z[i:i + 1])[0, g]
                out[g] += (ds.t[i] == g + 1) / ee[i, g] * (ds.y[i] - muE) * D[i, g] / n
        return out

    def mean_score_a(alpha):
        ee = PropensityFit(alpha.reshape(prop.alpha.shape), 2).raw_probs(ds.z)
        return ((ds.indicators() - ee)[:, :1] * ds.z).sum(axis=0) / n

    def log_e(alpha):
        return np.log(PropensityFit(alpha.reshape(prop.alpha.shape), 2).raw_probs(ds.z))

    def outcome_ll(gm):
        oc = OutcomeNuisanceFit(gm, outcome.tag, H, True, 1.0, 3)
        eta = np.log(oc.cond_mean(ds.z) / (3 - oc.cond_mean(ds.z)))
        return ds.y[:, None] * eta - 3 * np.logaddexp(0, eta)

    def aug_grad(gm, g):
        oc = OutcomeNuisanceFit(gm, outcome.tag, H, True, 1.0, 3)
        mu = 3 / (1 + np.exp(-D[:, g] @ beta))
        B = 1 - (ds.t == g + 1) / prop.probs(ds)[:, g]
        return ((B * (oc.cond_mean(ds.z)[:, g] - mu))[:, None] * D[:, g]).sum(axis=0) / n

    # every nuisance derivative by central differences
    a0, g0 = prop.alpha.ravel(), outcome.gamma
    sc_a, sc_g = _fd(log_e, a0, h), _fd(outcome_ll, g0, h)  # n x H x k, n x H x r
    dM = _fd(mean_aw, a0, h)  # H x d x k
    Ha = -_fd(mean_score_a, a0, h)
    Hg = -_fd(lambda gm: (ds.indicators()[:, :, None] * _fd(outcome_ll, gm, h)).sum(axis=(0, 1)) / n, g0, 1e-4)
    C1 = [np.linalg.solve(Ha, -dM[g].T) for g in range(H)]
    C2 = [np.linalg.solve(Hg, _fd(lambda gm: aug_grad(gm, g), g0, h).T) for g in range(H)]
    for g in range(H):
        np.testing.assert_allclose(m.C1[g], C1[g], rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(m.C2[g], C2[g], rtol=1e-4, atol=1e-6)

    # assemble S with explicit loops over samples and groups
    e = prop.probs(ds)
    S = np.zeros((d, d))
    for i in range(n):
        for g in range(H):
            if ds.t[i] != g + 1:
                continue
            mu = 3 / (1 + np.exp(-D[i, g] @ beta))
            first = (ds.y[i] - mu) * D[i, g] / e[i, g] - ls
            S += np.outer(first, sc_a[i, g] @ C1[g] + sc_g[i, g] @ C2[g]) / n
    np.testing.assert_allclose(m.S_hat, S, rtol=1e-4, atol=1e-6)
    act = list(fit.active)
    assert act
    K22 = m.K_hat[np.ix_(act, act)]
    direct = 2 * np.trace(np.linalg.solve(K22, (m.R_hat + S)[np.ix_(act, act)]))
    assert dric(fit, m, ds, prop, outcome, fam).penalty == pytest.approx(direct, rel=1e-4)


def test_ipic_classical_limit():
    rng = np.random.default_rng(0)
    n = 5000
    x = rng.standard_normal((n, 3))
    y = x @ [1.0, 0.5, -0.5] + rng.standard_normal(n)
    ds = Dataset.build(y, np.ones(n, int), x, np.ones((n, 1)), 1)
    fam = ModelFamily.gaussian(1.0)
    prop = KnownPropensity(np.ones((n, 1)))
    fit = ipw_glm_fit(ds, fam, prop, PenaltySpec.lasso(0.0))
    rep = ipic(fit, build_matrices(fit, ds, fam, prop), ds, prop, fam)
    assert abs(rep.penalty - 6.0) / 6.0 < 0.10


# ---- derivative suite: 50 randomized evaluations, central differences, 1e-5 relative


def _random_case(seed):
    rng = np.random.default_rng(seed)
    fam = [ModelFamily.binomial(1 + seed % 4), ModelFamily.gaussian(0.5 + seed % 3)][seed % 2]
    H = 2 + seed % 2
    n = 15
    x = rng.standard_normal((n, 2))
    z = np.column_stack([np.ones(n), rng.standard_normal(n)])
    t = np.r_[np.arange(1, H + 1), rng.integers(1, H + 1, n - H)]
    if fam.tag == "gaussian":
        y = rng.standard_normal(n) * 2
        ds = Dataset.build(y, t, x, z, H)
    else:
        ds = Dataset.build(rng.integers(0, fam.m + 1, n), t, x, z, H, m=fam.m)
    prop = PropensityFit(0.3 * rng.standard_normal((H - 1, 2)), H)
    gamma = 0.4 * rng.standard_normal(2)
    outcome = OutcomeNuisanceFit(gamma, fam.tag, H, True, 1.3, fam.m or 1)
    beta = 0.4 * rng.standard_normal(2 * H)
    signs = np.sign(beta) * (rng.random(2 * H) < 0.7)
    fit = types.SimpleNamespace(coef=beta, penalty=PenaltySpec.lasso(0.05),
                                sign_vector=lambda: signs)
    return ds, fam, prop, outcome, fit


def _fd(f, x0, h=1e-5):
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for j in range(x0.size):
        d = np.zeros_like(x0)
        d[j] = h
        cols.append((f(x0 + d) - f(x0 - d)) / (2 * h))
    return np.stack(cols, axis=-1)


def _close(a, b):
    scale = max(1.0, float(np.max(np.abs(b))))
    assert np.max(np.abs(a - b)) <= 1e-5 * scale


@pytest.mark.parametrize("seed", range(50))
def test_derivative_suite(seed):
    ds, fam, prop, outcome, fit = _random_case(seed)
    D = glm_design(ds)
    n = ds.n
    e = prop.probs(ds)
    A = ds.indicators() / e
    B = 1 - A
    m = build_matrices(fit, ds, fam, prop, outcome, mode="dr")
    beta = fit.coef

    # score of the weighted log-likelihood (enters Q, R, S)
    wll = lambda b: float(np.sum(A * loglik(fam, ds.y[:, None], D @ b))) / n
    g_fd = _fd(wll, beta)
    _close(m.score_mean, g_fd)

    # J: Jacobian of the weighted score
    def wscore(b):
        fb = types.SimpleNamespace(coef=b, penalty=fit.penalty, sign_vector=fit.sign_vector)
        return build_matrices(fb, ds, fam, prop).score_mean
    _close(m.J_hat, -_fd(wscore, beta))

    # conditional expected log-likelihood gradient and K
    def ell_E(b):
        tot = 0.0
        for i in range(n):
            for h in range(ds.h_count):
                o = make_oracle(outcome, fam, ds, D, i, h)
                tot += B[i, h] * cond_loglik(o, float(D[i, h] @ b))
        return tot / n
    full = lambda b: wll(b) + ell_E(b)
    _close(m.K_hat, -_hess_fd(full, beta))

    # C2: cross derivative of the augmentation term in gamma and beta
    r = outcome.gamma.size
    Hg = outcome.neg_hessian(ds) / n
    for h in range(ds.h_count):
        def aug_grad(gm, h=h):
            oc = OutcomeNuisanceFit(gm, outcome.tag, outcome.h_count, True, outcome.sigma2, outcome.m)
            mu_g = oc.cond_mean(ds.z)[:, h]
            mu = _mean(fam, D[:, h] @ beta)
            return ((B[:, h] * (mu_g - mu) / fam.dispersion)[:, None] * D[:, h]).sum(axis=0) / n
        cross = _fd(aug_grad, outcome.gamma)  # d x r
        _close(Hg @ m.C2[h], cross.T)
    assert r == 2

    # C1: derivative in alpha of the weighted residual (u - uE)
    a0 = prop.alpha.ravel()
    for h in range(ds.h_count):
        def wres(a, h=h):
            pf = PropensityFit(a.reshape(prop.alpha.shape), prop.h_count)
            ee = pf.probs(ds)
            res = (ds.y - outcome.cond_mean(ds.z)[:, h]) / fam.dispersion
            return (((ds.t == h + 1) / ee[:, h] * res)[:, None] * D[:, h]).sum(axis=0) / n
        dM = _fd(wres, a0)  # d x k
        _, hess = propensity_score_derivatives(prop, ds.z)
        Ha = -hess.mean(axis=0)
        _close(Ha @ m.C1[h], -dM.T)


def _mean(fam, eta):
    if fam.tag == "gaussian":
        return eta
    return fam.m / (1 + np.exp(-eta))


def _hess_fd(f, x0, h=1e-4):
    """Second differences of a scalar function."""
    k = x0.size
    out = np.zeros((k, k))
    E = np.eye(k) * h
    for a in range(k):
        for b in range(k):
            out[a, b] = (f(x0 + E[a] + E[b]) - f(x0 + E[a] - E[b]) - f(x0 - E[a] + E[b])
                         + f(x0 - E[a] - E[b])) / (4 * h * h)
    return out


# ---- misc


def test_qicw_penalty_and_null_deviance():
    ds = multi_group_binomial(n=60, H=2, seed=0)
    fam = ModelFamily.binomial(ds.m)
    prop = KnownPropensity(np.full((60, 2), 0.5))
    fit = ipw_glm_fit(ds, fam, prop, PenaltySpec.lasso(1e3))
    rep = qicw(fit, ds, prop, fam)
    assert rep.penalty == 0
    assert rep.gof == pytest.approx(glm_gof(np.zeros(fit.coef.size), ds, fam, prop.probs(ds), glm_design(ds)))


def test_resolve_sigma2():
    ds, e = two_group_data(n=30, p=2, seed=0)
    assert resolve_sigma2(NoiseSpec(1.0), ds, CONTRAST, KnownPropensity(e)) == 1.0
    w = pseudo_outcomes(ds, CONTRAST, e)
    coef = np.linalg.lstsq(ds.x, w, rcond=None)[0]
    hand = ((w - ds.x @ coef) ** 2).sum() / (30 - 2)
    assert resolve_sigma2(NoiseSpec(), ds, CONTRAST, KnownPropensity(e)) == pytest.approx(hand, abs=1e-12)
    small = Dataset.build(ds.y[:2], ds.t[:2], ds.x[:2], ds.z[:2], 2)
    with pytest.raises(DataError, match="N > p"):
        resolve_sigma2(NoiseSpec(), small, CONTRAST, KnownPropensity(e[:2]))


def test_resolve_sigma2_degenerate_warns():
    x = np.column_stack([np.ones(6), np.arange(6.0)])
    ds = Dataset.build(2 * np.arange(6.0), np.ones(6, int), x, np.zeros((6, 1)), 1)
    with pytest.warns(RuntimeWarning, match="degenerate"):
        assert resolve_sigma2(NoiseSpec(), ds, ContrastSpec((1.0,)), KnownPropensity(np.ones((6, 1)))) == 0.0


def test_singular_active_gram_reports_failure():
    n = 10
    x = np.column_stack([np.arange(n, dtype=float)] * 2)
    ds = Dataset.build(np.arange(n, dtype=float), np.ones(n, int), x, np.zeros((n, 1)), 1)
    one = KnownPropensity(np.ones((n, 1)))
    fit = types.SimpleNamespace(coef=np.array([0.5, 0.5]), active=(0, 1), active_size=2,
                                penalty=PenaltySpec.lasso(0.1))
    rep = ipcp_lasso(fit, ds, ContrastSpec((1.0,)), one, KNOWN1)
    assert rep.failed and np.isnan(rep.total)
