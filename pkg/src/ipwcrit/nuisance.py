"""Assignment and outcome nuisance models."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

from .data import DataError, Dataset, ModelFamily

EPS_PROP = 1e-3


def clip_probs(e: np.ndarray, eps: float = EPS_PROP) -> np.ndarray:
    """Floor at eps and renormalize rows; every entry lands in [eps, 1 - eps] and rows sum to 1.

    Rows already above the floor are returned unchanged (up to renormalization).
    """
    e = np.asarray(e, dtype=float)
    H = e.shape[1]
    if H == 1:
        return np.ones_like(e)
    e = np.maximum(e, 0.0)
    e = e / e.sum(axis=1, keepdims=True)
    low = e.min(axis=1) < eps
    if np.any(low):
        # shrink offending rows towards uniform just far enough to reach the floor
        m = e[low].min(axis=1, keepdims=True)
        s = (eps - 1.0 / H) / (m - 1.0 / H)
        e = e.copy()
        e[low] = 1.0 / H + s * (e[low] - 1.0 / H)
    return e


@dataclass(frozen=True)
class KnownPropensity:
    """Exact propensities, n x H (simulation and --propensity known:<file>)."""

    e: np.ndarray
    estimated = False

    def probs(self, dataset: Optional[Dataset] = None) -> np.ndarray:
        return clip_probs(np.asarray(self.e, dtype=float))


@dataclass(frozen=True)
class PropensityFit:
    """Multinomial logit with reference group H (alpha^[H] = 0). alpha is (H-1) x q."""

    alpha: np.ndarray
    h_count: int
    separated: bool = False
    converged: bool = True
    estimated = True

    def raw_probs(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        eta = np.zeros((z.shape[0], self.h_count))
        if self.h_count > 1:
            eta[:, :-1] = z @ self.alpha.T
        return softmax(eta, axis=1)

    def probs(self, dataset: Dataset) -> np.ndarray:
        return clip_probs(self.raw_probs(dataset.z))

    @property
    def dim(self) -> int:
        return self.alpha.size


def _mnl_loglik(a, Z, T, H):
    alpha = a.reshape(H - 1, Z.shape[1])
    eta = np.zeros((Z.shape[0], H))
    eta[:, :-1] = Z @ alpha.T
    eta -= eta.max(axis=1, keepdims=True)
    logp = eta - np.log(np.exp(eta).sum(axis=1, keepdims=True))
    return float((T * logp).sum())


def _mnl_grad_hess(a, Z, T, H):
    q = Z.shape[1]
    fit = PropensityFit(a.reshape(H - 1, q), H)
    E = fit.raw_probs(Z)
    grad = ((T - E)[:, :-1, None] * Z[:, None, :]).reshape(Z.shape[0], -1).sum(axis=0)
    Hs = -mnl_info(E, Z).sum(axis=0)
    return grad, Hs


def mnl_info(E, Z):
    """Per-sample (diag(e) - ee') kron zz' over the H-1 free blocks; n x k x k."""
    n, H = E.shape
    Ef = E[:, :-1]
    V = np.einsum("ik,kl->ikl", Ef, np.eye(H - 1)) - Ef[:, :, None] * Ef[:, None, :]
    ZZ = Z[:, :, None] * Z[:, None, :]
    q = Z.shape[1]
    out = np.einsum("ikl,iab->ikalb", V, ZZ).reshape(n, (H - 1) * q, (H - 1) * q)
    return out


def fit_propensity(dataset: Dataset, max_iter: int = 200) -> PropensityFit:
    H = dataset.h_count
    Z = np.asarray(dataset.z, dtype=float)
    T = dataset.indicators()
    if H == 1:
        return PropensityFit(np.zeros((0, Z.shape[1])), 1)
    if Z.shape[1] < 1:
        raise DataError("propensity model needs at least one confounder column")
    if np.any(T.sum(axis=0) == 0):
        raise DataError("empty group: every group must be observed at least once")
    q = Z.shape[1]
    a = np.zeros((H - 1) * q)
    ll = _mnl_loglik(a, Z, T, H)
    converged = False
    separated = False
    for _ in range(max_iter):
        g, Hs = _mnl_grad_hess(a, Z, T, H)
        if np.linalg.norm(g) < 1e-10 * max(1, Z.shape[0]):
            converged = True
            break
        try:
            step = np.linalg.solve(-Hs + 1e-12 * np.eye(len(a)), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-Hs, g, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = a + t * step
            llc = _mnl_loglik(cand, Z, T, H)
            if llc >= ll - 1e-14:
                break
            t *= 0.5
        a, ll_old, ll = cand, ll, llc
        if np.max(np.abs(Z @ a.reshape(H - 1, q).T), initial=0.0) > 25.0:
            separated = True
            break
        if abs(ll - ll_old) < 1e-15 * max(1.0, abs(ll)) and np.max(np.abs(t * step)) < 1e-10:
            converged = True
            break
    if separated:
        warnings.warn("propensity model: perfect separation, fit clipped", RuntimeWarning)
    return PropensityFit(a.reshape(H - 1, q), H, separated=separated, converged=converged)


def propensity_score_derivatives(fit: PropensityFit, z) -> tuple:
    """Scores d log e^[h]/d alpha (n x H x k) and the Hessian of sum_h t^[h] log e^[h] (n x k x k).

    The Hessian does not depend on which group was observed.
    """
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    H = fit.h_count
    q = Z.shape[1]
    E = fit.raw_probs(Z)
    if H == 1:
        return np.zeros((Z.shape[0], 1, 0)), np.zeros((Z.shape[0], 0, 0))
    D = np.eye(H)[:, :-1][None, :, :] - E[:, None, :-1]
    score = (D[:, :, :, None] * Z[:, None, None, :]).reshape(Z.shape[0], H, (H - 1) * q)
    return score, -mnl_info(E, Z)


# ----------------------------------------------------------------------------
# outcome model


@dataclass(frozen=True)
class OutcomeNuisanceFit:
    """Outcome given confounders. Pooled: one gamma for all groups; otherwise one block per group."""

    gamma: np.ndarray
    tag: str
    h_count: int
    pooled: bool = True
    sigma2: float = 1.0
    m: int = 1

    def design(self, z) -> np.ndarray:
        Z = np.asarray(z, dtype=float)
        n, q = Z.shape
        H = self.h_count
        if self.pooled:
            return np.repeat(Z[:, None, :], H, axis=1)
        out = np.zeros((n, H, q * H))
        for h in range(H):
            out[:, h, h * q:(h + 1) * q] = Z
        return out

    def linear(self, z) -> np.ndarray:
        return self.design(z) @ self.gamma

    def cond_mean(self, z) -> np.ndarray:
        """E(y^[h] | z; gamma), n x H."""
        lin = self.linear(z)
        if self.tag == "binomial_logit":
            return self.m * expit(lin)
        return lin

    def mean_slope(self, z) -> np.ndarray:
        """d cond_mean / d linear predictor, n x H."""
        lin = self.linear(z)
        if self.tag == "binomial_logit":
            p = expit(lin)
            return self.m * p * (1 - p)
        return np.ones_like(lin)

    def score(self, dataset: Dataset) -> np.ndarray:
        """d log f(y_i | z_i; gamma)/d gamma evaluated at each (i, h) with y_i; n x H x r."""
        Dz = self.design(dataset.z)
        resid = dataset.y[:, None] - self.cond_mean(dataset.z)
        scale = 1.0 / self.sigma2 if self.tag == "gaussian" else 1.0
        return Dz * (resid * scale)[:, :, None]

    def neg_hessian(self, dataset: Dataset) -> np.ndarray:
        """-d^2 sum_i sum_h t log f / d gamma d gamma'."""
        Dz = self.design(dataset.z)
        T = dataset.indicators()
        w = T * self.mean_slope(dataset.z)
        if self.tag == "gaussian":
            w = w / self.sigma2
        return np.einsum("ih,iha,ihb->ab", w, Dz, Dz)


def fit_outcome_nuisance(dataset: Dataset, family: ModelFamily, pooled: bool = True,
                         max_iter: int = 100) -> OutcomeNuisanceFit:
    H = dataset.h_count
    tmp = OutcomeNuisanceFit(np.zeros(0), family.tag, H, pooled, 1.0, family.m or 1)
    Dz = tmp.design(dataset.z)
    rows = Dz[np.arange(dataset.n), dataset.t - 1]
    y = dataset.y
    r = rows.shape[1]
    if r == 0 or np.linalg.matrix_rank(rows) < r:
        raise DataError("rank-deficient confounder design for the outcome model")
    if family.tag == "gaussian":
        gamma, *_ = np.linalg.lstsq(rows, y, rcond=None)
        resid = y - rows @ gamma
        s2 = float(resid @ resid / len(y))
        if s2 <= 0:
            raise DataError("outcome model fits exactly; residual variance is zero")
        return OutcomeNuisanceFit(gamma, "gaussian", H, pooled, s2, 1)
    m = int(family.m)
    gamma = np.zeros(r)
    for _ in range(max_iter):
        p = expit(np.clip(rows @ gamma, -30, 30))
        g = rows.T @ (y - m * p)
        Hs = (rows * (m * p * (1 - p))[:, None]).T @ rows
        step = np.linalg.solve(Hs, g)
        gamma = gamma + step
        if np.max(np.abs(rows @ gamma)) > 30.0:
            warnings.warn("outcome model: perfect separation, fit stopped", RuntimeWarning)
            break
        if np.max(np.abs(step)) < 1e-12:
            break
    return OutcomeNuisanceFit(gamma, "binomial_logit", H, pooled, 1.0, m)


@dataclass(frozen=True)
class CondLoglikOracle:
    """E{l(beta) | gamma} for one (i, h): family pieces plus the bound design rows.

    Beta-free constants are dropped: the gaussian value omits -log(2 pi sigma2)/2 and the
    binomial value omits log C(m, y).
    """

    family: ModelFamily
    cond_mean: float
    mean_slope: float
    x: np.ndarray
    zo: np.ndarray
    sigma2_gamma: float = 0.0


def cond_loglik(oracle: CondLoglikOracle, eta: float) -> float:
    fam = oracle.family
    if fam.tag == "gaussian":
        return -((oracle.cond_mean - eta) ** 2 + oracle.sigma2_gamma) / (2.0 * fam.dispersion)
    if fam.tag == "binomial_logit":
        e = float(np.clip(eta, -30, 30))
        return oracle.cond_mean * e - fam.m * np.logaddexp(0.0, e)
    raise DataError(f"unsupported family: {fam.tag}")


def _b1_b2(fam: ModelFamily, eta):
    if fam.tag == "gaussian":
        return eta, np.ones_like(np.asarray(eta, dtype=float))
    e = np.clip(eta, -30, 30)
    p = expit(e)
    return fam.m * p, fam.m * p * (1 - p)


def cond_loglik_grad_beta(oracle: CondLoglikOracle, beta) -> np.ndarray:
    eta = float(oracle.x @ beta)
    b1, _ = _b1_b2(oracle.family, eta)
    return (oracle.cond_mean - b1) / oracle.family.dispersion * oracle.x


def cond_loglik_hess_beta(oracle: CondLoglikOracle, beta) -> np.ndarray:
    eta = float(oracle.x @ beta)
    _, b2 = _b1_b2(oracle.family, eta)
    return -b2 / oracle.family.dispersion * np.outer(oracle.x, oracle.x)


def cond_loglik_cross_grad_gamma_beta(oracle: CondLoglikOracle, beta=None) -> np.ndarray:
    """d^2 E{l | gamma} / d gamma d beta', r x d."""
    return oracle.mean_slope / oracle.family.dispersion * np.outer(oracle.zo, oracle.x)


def make_oracle(fit: OutcomeNuisanceFit, family: ModelFamily, dataset: Dataset, design, i: int,
                h: int) -> CondLoglikOracle:
    """Oracle for sample i, group h (0-based); ``design`` is the n x H x d beta design."""
    return CondLoglikOracle(family, float(fit.cond_mean(dataset.z[i:i + 1])[0, h]),
                            float(fit.mean_slope(dataset.z[i:i + 1])[0, h]),
                            np.asarray(design[i, h]), fit.design(dataset.z[i:i + 1])[0, h],
                            fit.sigma2 if fit.tag == "gaussian" else 0.0)
