"""Model selection criteria for IPW and doubly robust sparse estimation.

Least-squares criteria (QICw, IPCp) live on the pseudo-outcome scale.  GLM criteria use
the full log-likelihood in the goodness-of-fit term, -2 sum_i sum_h (t/e) l(beta),
including log C(m, y) for binomial outcomes and -log(2 pi sigma2)/2 for gaussian ones.
All sandwich matrices are per-sample averages (divided by N).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit, gammaln

from .data import ContrastSpec, DataError, Dataset, ModelFamily, PenaltySpec
from .estimators import Propensity, glm_design, group_pseudo_outcomes, pseudo_outcomes
from .nuisance import OutcomeNuisanceFit, propensity_score_derivatives
from .solvers import PenalizedFit, rho_prime, rho_second

COND_MAX = 1e12
GOF_NOTE = "gof includes full log-likelihood constants; differences across lambda are exact"


class CriterionFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Known sigma2, or ``None`` to use the full-model plug-in estimate."""

    sigma2: Optional[float] = None

    def __post_init__(self):
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise DataError("sigma2 must be positive")

    @property
    def policy(self) -> str:
        return "known" if self.sigma2 is not None else "plugin_full_model"


@dataclass(frozen=True)
class CriterionReport:
    criterion: str
    lam: PenaltySpec
    gof: float
    penalty: float
    total: float
    active_size: int
    notes: str = ""
    failed: bool = False

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "lambda": self.lam.to_dict(), "gof": self.gof,
                "penalty": self.penalty, "total": self.total, "active_size": self.active_size,
                "notes": self.notes, "failed": self.failed}


def _report(name, fit, gof, pen, notes=""):
    gof = float(gof)
    pen = float(pen)
    return CriterionReport(name, fit.penalty, gof, pen, gof + pen, fit.active_size, notes)


def failed_report(name, fit, reason) -> CriterionReport:
    return CriterionReport(name, fit.penalty, float("nan"), float("nan"), float("nan"),
                           fit.active_size, reason, failed=True)


def guarded_solve(A, B):
    """A^{-1} B with a condition-number guard."""
    A = np.atleast_2d(A)
    if A.size == 0:
        return np.zeros_like(np.atleast_2d(B))
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > COND_MAX:
        raise CriterionFailure("matrix is singular or ill-conditioned (cond > 1e12)")
    return np.linalg.solve(A, B)


# ----------------------------------------------------------------------------
# Gaussian contrast mode


def resolve_sigma2(noise: NoiseSpec, dataset: Dataset, contrast: Optional[ContrastSpec],
                   propensity: Propensity) -> float:
    """Known value, or sum (w - x'theta_0)^2 / (N - p) from the unpenalized IPW fit.

    With ``contrast=None`` the per-group pseudo-outcomes t y / e are pooled, divisor H (N - p).
    """
    if noise.sigma2 is not None:
        return float(noise.sigma2)
    n, p = dataset.x.shape
    if n <= p:
        raise DataError("plug-in sigma2 needs N > p")
    e = propensity.probs(dataset)
    if contrast is None:
        W = group_pseudo_outcomes(dataset, e)
    else:
        W = pseudo_outcomes(dataset, contrast, e)[:, None]
    coef, *_ = np.linalg.lstsq(dataset.x, W, rcond=None)
    resid = W - dataset.x @ coef
    s2 = float((resid ** 2).sum() / (W.shape[1] * (n - p)))
    if s2 <= 1e-14 * max(1.0, float((W ** 2).sum())):
        warnings.warn("plug-in sigma2 is zero: pseudo-outcomes are linear in x (degenerate)",
                      RuntimeWarning)
        return 0.0
    return s2


def _lsq_rss(fit, dataset, contrast, e):
    if fit.coef.ndim == 2:
        W = group_pseudo_outcomes(dataset, e)
        return float(((W - dataset.x @ fit.coef) ** 2).sum())
    w = pseudo_outcomes(dataset, contrast, e)
    return float(((w - dataset.x @ fit.coef) ** 2).sum())


def qicw(fit: PenalizedFit, dataset: Dataset, propensity: Propensity,
         family: Optional[ModelFamily] = None, noise: Optional[NoiseSpec] = None,
         contrast: Optional[ContrastSpec] = None, design=None) -> CriterionReport:
    """QICw: gof + 2 p_hat.

    Least-squares mode (``contrast`` given, or a group fit) uses gof = RSS / sigma2; GLM
    mode uses gof = -2 sum (t/e) l(beta).
    """
    e = propensity.probs(dataset)
    if contrast is not None or fit.coef.ndim == 2:
        s2 = resolve_sigma2(noise or NoiseSpec(), dataset, contrast, propensity)
        if s2 <= 0:
            return failed_report("qicw", fit, "sigma2 is zero")
        return _report("qicw", fit, _lsq_rss(fit, dataset, contrast, e) / s2, 2 * fit.active_size)
    if family is None:
        raise DataError("qicw in GLM mode needs a family")
    D = glm_design(dataset) if design is None else design
    return _report("qicw", fit, glm_gof(fit.coef, dataset, family, e, D), 2 * fit.active_size,
                   GOF_NOTE)


def ipcp_lasso(fit: PenalizedFit, dataset: Dataset, contrast: ContrastSpec, propensity: Propensity,
               noise: NoiseSpec) -> CriterionReport:
    return _ipcp_trace("ipcp", fit, dataset, contrast, propensity, noise, 0.0)


def ipcp_enet(fit: PenalizedFit, dataset: Dataset, contrast: ContrastSpec, propensity: Propensity,
              noise: NoiseSpec) -> CriterionReport:
    lam2 = fit.penalty.lam2 if fit.penalty.kind == "elastic_net" else 0.0
    return _ipcp_trace("ipcp", fit, dataset, contrast, propensity, noise, lam2)


def ipcp_weight_matrix(dataset, contrast, e, active):
    """sum_i sum_h c_h^2 / e_ih x_i x_i' on the active columns."""
    X2 = dataset.x[:, list(active)]
    a = (contrast.array[None, :] ** 2 / e).sum(axis=1)
    return (X2 * a[:, None]).T @ X2, X2.T @ X2


def _ipcp_trace(name, fit, dataset, contrast, propensity, noise, lam2):
    e = propensity.probs(dataset)
    s2 = resolve_sigma2(noise, dataset, contrast, propensity)
    gof = _lsq_rss(fit, dataset, contrast, e)
    if fit.active_size == 0:
        return _report(name, fit, gof, 0.0)
    M, G = ipcp_weight_matrix(dataset, contrast, e, fit.active)
    k = len(fit.active)
    try:
        tr = np.trace(guarded_solve(G + lam2 * np.eye(k), (1.0 + lam2) * M))
    except CriterionFailure as exc:
        return failed_report(name, fit, str(exc))
    return _report(name, fit, gof, 2.0 * s2 * tr)


def group_R(theta_active: np.ndarray, G: np.ndarray, lam: float) -> np.ndarray:
    """Jacobian matrix of the group-lasso active-set stationarity map (h-major blocks).

    For the objective sum (w - x'theta)^2 + lam sum_j ||theta_j||, stationarity reads
    G theta^[h] = X'w^[h] - (lam/2) theta_j^[h]/||theta_j||, hence
    R_hh' = delta_hh' I + (lam/2) G^{-1} diag(delta_hh'/||theta_j|| - theta_jh theta_jh'/||theta_j||^3).
    """
    k, H = theta_active.shape
    norms = np.sqrt((theta_active ** 2).sum(axis=1))
    Ginv = np.linalg.inv(G)
    R = np.eye(k * H)
    for h in range(H):
        for g in range(H):
            d = -theta_active[:, h] * theta_active[:, g] / norms ** 3
            if h == g:
                d = d + 1.0 / norms
            R[h * k:(h + 1) * k, g * k:(g + 1) * k] += 0.5 * lam * Ginv * d[None, :]
    return R


def ipcp_group(fit: PenalizedFit, dataset: Dataset, propensity: Propensity,
               noise: NoiseSpec) -> CriterionReport:
    e = propensity.probs(dataset)
    s2 = resolve_sigma2(noise, dataset, None, propensity)
    gof = _lsq_rss(fit, dataset, None, e)
    if fit.active_size == 0:
        return _report("ipcp", fit, gof, 0.0)
    J = list(fit.active)
    X2 = dataset.x[:, J]
    G = X2.T @ X2
    k, H = len(J), dataset.h_count
    try:
        if np.linalg.cond(G) > COND_MAX:
            raise CriterionFailure("singular active Gram matrix")
        R = group_R(fit.coef[J], G, fit.penalty.lam)
        Ginv = np.linalg.inv(G)
        tr = 0.0
        for h in range(H):
            Bh = Ginv @ ((X2 / e[:, [h]]).T @ X2)
            E = np.zeros((k * H, k))
            E[h * k:(h + 1) * k] = Bh
            tr += np.trace(guarded_solve(R, E)[h * k:(h + 1) * k])
    except CriterionFailure as exc:
        return failed_report("ipcp", fit, str(exc))
    return _report("ipcp", fit, gof, 2.0 * s2 * tr)


# ----------------------------------------------------------------------------
# GLM mode


def loglik(family: ModelFamily, y, eta) -> np.ndarray:
    """Full log-likelihood per entry (y broadcast against eta)."""
    if family.tag == "gaussian":
        s2 = family.dispersion
        return -(y - eta) ** 2 / (2 * s2) - 0.5 * np.log(2 * np.pi * s2)
    m = family.m
    e = np.clip(eta, -30, 30)
    const = gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)
    return y * e - m * np.logaddexp(0.0, e) + const


def mean_fn(family: ModelFamily, eta):
    if family.tag == "gaussian":
        return eta, np.ones_like(eta)
    e = np.clip(eta, -30, 30)
    p = expit(e)
    return family.m * p, family.m * p * (1 - p)


def glm_gof(beta, dataset: Dataset, family: ModelFamily, e, design) -> float:
    eta = design @ beta
    A = dataset.indicators() / e
    return float(-2.0 * np.sum(A * loglik(family, dataset.y[:, None], eta)))


@dataclass
class CriterionMatrices:
    J_hat: np.ndarray
    Q_hat: np.ndarray
    R_hat: Optional[np.ndarray] = None
    K_hat: Optional[np.ndarray] = None
    S_hat: Optional[np.ndarray] = None
    C1: List[np.ndarray] = field(default_factory=list)
    C2: List[np.ndarray] = field(default_factory=list)
    score_outer: Optional[np.ndarray] = None
    score_mean: Optional[np.ndarray] = None
    mode: str = "ipw"


def _penalty_gradient(fit: PenalizedFit) -> np.ndarray:
    """lambda sgn(beta) on the active set (the subgradient used in the displays)."""
    return fit.penalty.lam * fit.sign_vector()


def build_matrices(fit: PenalizedFit, dataset: Dataset, family: ModelFamily, propensity: Propensity,
                   outcome: Optional[OutcomeNuisanceFit] = None, mode: str = "ipw",
                   design=None) -> CriterionMatrices:
    D = glm_design(dataset) if design is None else np.asarray(design)
    n = dataset.n
    beta = np.asarray(fit.coef)
    eta = D @ beta
    T = dataset.indicators()
    e = propensity.probs(dataset)
    A = T / e
    phi = family.dispersion
    mu, curv = mean_fn(family, eta)
    curv = curv / phi
    u = ((dataset.y[:, None] - mu) / phi)[:, :, None] * D
    ls = _penalty_gradient(fit)

    J = np.einsum("ih,ihj,ihk->jk", A * curv, D, D) / n
    U = (A[:, :, None] * u).sum(axis=1)
    S_outer = np.einsum("ih,ihj,ihk->jk", A ** 2, u, u) / n
    g_mean = U.mean(axis=0)
    Q = S_outer - np.outer(ls, g_mean)
    out = CriterionMatrices(J, Q, score_outer=S_outer, score_mean=g_mean, mode=mode)
    if mode == "ipw":
        return out
    if mode != "dr":
        raise DataError(f"unknown matrix mode: {mode}")
    if outcome is None:
        raise DataError("dr mode requires an outcome nuisance fit")
    B = 1.0 - A
    mu_g = outcome.cond_mean(dataset.z)
    uE = ((mu_g - mu) / phi)[:, :, None] * D
    V = (A[:, :, None] * u + B[:, :, None] * uE).sum(axis=1)
    out.R_hat = (U - ls[None, :]).T @ V / n
    out.K_hat = np.einsum("ih,ihj,ihk->jk", curv, D, D) / n

    d = beta.size
    H = dataset.h_count
    S = np.zeros((d, d))
    first = (T[:, :, None] * (A[:, :, None] * u - ls[None, None, :]))
    if getattr(propensity, "estimated", False) and propensity.dim > 0:
        sc_a, hess_a = propensity_score_derivatives(propensity, dataset.z)
        Ha = -hess_a.mean(axis=0)
        for h in range(H):
            M = (A[:, h, None, None] * sc_a[:, h, :, None] * (u[:, h] - uE[:, h])[:, None, :]).mean(axis=0)
            C1 = guarded_solve(Ha, M)
            out.C1.append(C1)
            S += first[:, h].T @ (sc_a[:, h] @ C1) / n
    Zo = outcome.design(dataset.z)
    Hg = outcome.neg_hessian(dataset) / n
    slope = outcome.mean_slope(dataset.z) / phi
    sc_g = outcome.score(dataset)
    for h in range(H):
        M = np.einsum("i,ia,ib->ab", B[:, h] * slope[:, h], Zo[:, h], D[:, h]) / n
        C2 = guarded_solve(Hg, M)
        out.C2.append(C2)
        S += first[:, h].T @ (sc_g[:, h] @ C2) / n
    out.S_hat = S
    return out


def _sub(M, active):
    idx = list(active)
    return M[np.ix_(idx, idx)]


def _trace_criterion(name, fit, A, B, gof, notes=GOF_NOTE):
    if fit.active_size == 0:
        return _report(name, fit, gof, 0.0, notes)
    try:
        tr = np.trace(guarded_solve(_sub(A, fit.active), _sub(B, fit.active)))
    except CriterionFailure as exc:
        return failed_report(name, fit, str(exc))
    return _report(name, fit, gof, 2.0 * tr, notes)


def ipic(fit, matrices: CriterionMatrices, dataset, propensity, family, design=None) -> CriterionReport:
    D = glm_design(dataset) if design is None else design
    gof = glm_gof(fit.coef, dataset, family, propensity.probs(dataset), D)
    return _trace_criterion("ipic", fit, matrices.J_hat, matrices.Q_hat, gof)


def dr_aic(fit, matrices: CriterionMatrices, dataset, propensity, family, design=None) -> CriterionReport:
    if matrices.R_hat is None:
        raise DataError("dr_aic needs dr-mode matrices")
    D = glm_design(dataset) if design is None else design
    gof = glm_gof(fit.coef, dataset, family, propensity.probs(dataset), D)
    return _trace_criterion("dr_aic", fit, matrices.J_hat, matrices.R_hat, gof)


def dric(fit, matrices: CriterionMatrices, dataset, propensity, outcome, family,
         design=None) -> CriterionReport:
    if matrices.R_hat is None or matrices.S_hat is None:
        raise DataError("dric needs dr-mode matrices")
    D = glm_design(dataset) if design is None else design
    gof = glm_gof(fit.coef, dataset, family, propensity.probs(dataset), D)
    return _trace_criterion("dric", fit, matrices.K_hat, matrices.R_hat + matrices.S_hat, gof)


def ipic_nonconvex(fit, dataset, propensity, family, penalty: Optional[PenaltySpec] = None,
                   design=None, matrices: Optional[CriterionMatrices] = None) -> CriterionReport:
    penalty = penalty or fit.penalty
    if penalty.kind not in ("scad", "mcplus"):
        raise DataError("ipic_nonconvex needs a scad or mcplus penalty")
    D = glm_design(dataset) if design is None else design
    mats = matrices or build_matrices(fit, dataset, family, propensity, design=D)
    beta = np.asarray(fit.coef)
    drho = rho_prime(beta, penalty) * np.sign(beta)
    d2rho = rho_second(beta, penalty) * (np.abs(beta) > 0)
    g = mats.score_mean
    M = np.outer(drho, drho) + mats.score_outer - (np.outer(g, drho) + np.outer(drho, g))
    gof = glm_gof(beta, dataset, family, propensity.probs(dataset), D)
    return _trace_criterion("ipic", fit, mats.J_hat + np.diag(d2rho), M, gof)
