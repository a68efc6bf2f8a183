"""Penalized least-squares and GLM minimizers.

Least-squares objectives use the total scale, sum_i (w_i - x_i'theta)^2 + pen(theta),
so the lasso shutoff is lambda_max = 2 max_j |sum_i w_i x_ij|.  GLM objectives use the
per-sample scale, -(1/N) sum (weighted log-likelihood) + pen(beta).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import DataError, ModelFamily, PenaltySpec

EPS_ACTIVE = 1e-8
TOL = 1e-8
TOL_KKT = 1e-6
MAX_ITER = 10_000
ETA_MAX = 30.0


class SolverError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PenalizedFit:
    coef: np.ndarray
    active: Tuple[int, ...]
    signs: np.ndarray
    objective_value: float
    iterations: int
    converged: bool
    penalty: PenaltySpec
    kkt_residual: float = 0.0
    kkt_tol: float = TOL_KKT
    flags: Tuple[str, ...] = ()
    history: Tuple[float, ...] = field(default=(), repr=False)
    inner_coef: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def active_size(self) -> int:
        return len(self.active)

    def sign_vector(self) -> np.ndarray:
        """sgn(coef) over the whole vector, zero off the active set."""
        s = np.zeros(self.coef.shape[0])
        s[list(self.active)] = self.signs
        return s

    def summary(self) -> dict:
        return {
            "penalty": self.penalty.to_dict(),
            "coef": np.asarray(self.coef).tolist(),
            "active": list(self.active),
            "active_size": self.active_size,
            "objective": self.objective_value,
            "iterations": self.iterations,
            "converged": self.converged,
            "kkt_residual": self.kkt_residual,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class WeightedLsqProblem:
    w: np.ndarray
    design: np.ndarray
    penalty: PenaltySpec


@dataclass(frozen=True)
class GlmProblem:
    """Weighted natural-link GLM with optional DR augmentation.

    Row (i, h) contributes weights[i, h] * l(y_i; eta_ih) and, when given,
    aug_weights[i, h] * E{l(eta_ih) | gamma}, represented through the conditional
    mean aug_response[i, h].
    """

    design: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    family: ModelFamily
    penalty: PenaltySpec
    aug_weights: Optional[np.ndarray] = None
    aug_response: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def dim(self) -> int:
        return self.design.shape[2]


def _soft(u, lam):
    if u > lam:
        return u - lam
    if u < -lam:
        return u + lam
    return 0.0


def _make_fit(coef, penalty, obj, iters, converged, kkt, kkt_tol, flags=(), history=(), inner=None):
    coef = np.asarray(coef, dtype=float)
    ref = coef if inner is None else inner
    if ref.ndim == 1:
        active = tuple(int(j) for j in np.flatnonzero(np.abs(ref) > EPS_ACTIVE))
        signs = np.sign(ref[list(active)])
    else:
        norms = np.sqrt((ref ** 2).sum(axis=1))
        active = tuple(int(j) for j in np.flatnonzero(norms > EPS_ACTIVE))
        signs = np.zeros(len(active))
    return PenalizedFit(coef, active, signs, float(obj), int(iters), bool(converged), penalty,
                        float(kkt), float(kkt_tol), tuple(flags), tuple(history), inner)


def cd_quadratic(G, c, lam, beta=None, tol=TOL, max_iter=MAX_ITER, track=False):
    """Cyclic coordinate descent on 0.5 b'Gb - c'b + sum_j lam_j |b_j|."""
    d = len(c)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (d,))
    beta = np.zeros(d) if beta is None else np.array(beta, dtype=float)
    diag = np.diag(G).copy()
    r = c - G @ beta
    history = []
    it = 0
    done = False
    while it < max_iter:
        it += 1
        big = 0.0
        for j in range(d):
            gjj = diag[j]
            if gjj <= 0.0:
                if beta[j] != 0.0:
                    r += G[:, j] * beta[j]
                    beta[j] = 0.0
                continue
            old = beta[j]
            new = _soft(r[j] + gjj * old, lam[j]) / gjj
            if new != old:
                delta = new - old
                beta[j] = new
                r -= G[:, j] * delta
                if abs(delta) > big:
                    big = abs(delta)
        if track:
            history.append(0.5 * beta @ G @ beta - c @ beta + np.sum(lam * np.abs(beta)))
        if big < tol:
            done = True
            break
    return beta, it, done, history


def _group_block_min(Hgg, u, lam):
    """argmin_b 0.5 b'Hgg b - u'b + lam ||b|| (exact)."""
    nu = np.linalg.norm(u)
    if nu <= lam:
        return np.zeros_like(u)
    evals, Q = np.linalg.eigh(Hgg)
    ut = Q.T @ u
    if lam == 0.0:
        return Q @ (ut / evals)
    f = lambda r: np.sum(ut ** 2 / (evals * r + lam) ** 2) - 1.0
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise SolverError("group block update diverged")
    r = brentq(f, 0.0, hi, xtol=1e-15, rtol=1e-15)
    return Q @ (ut / (evals + lam / r))


def bcd_quadratic(G, c, lam, groups, beta=None, tol=TOL, max_iter=MAX_ITER, track=False):
    """Block coordinate descent on 0.5 b'Gb - c'b + lam sum_g ||b_g||."""
    d = len(c)
    beta = np.zeros(d) if beta is None else np.array(beta, dtype=float)
    blocks = [np.flatnonzero(groups == g) for g in np.unique(groups)]
    r = c - G @ beta
    history = []
    it = 0
    done = False
    while it < max_iter:
        it += 1
        big = 0.0
        for idx in blocks:
            Hgg = G[np.ix_(idx, idx)]
            if np.all(np.diag(Hgg) <= 0):
                continue
            old = beta[idx].copy()
            u = r[idx] + Hgg @ old
            new = _group_block_min(Hgg, u, lam)
            delta = new - old
            if np.any(delta != 0):
                beta[idx] = new
                r -= G[:, idx] @ delta
                big = max(big, float(np.max(np.abs(delta))))
        if track:
            pen = lam * sum(np.linalg.norm(beta[idx]) for idx in blocks)
            history.append(0.5 * beta @ G @ beta - c @ beta + pen)
        if big < tol:
            done = True
            break
    return beta, it, done, history


def _lsq_kkt(grad, coef, lam):
    res = 0.0
    for j in range(len(coef)):
        if abs(coef[j]) > EPS_ACTIVE:
            res = max(res, abs(grad[j] + lam * np.sign(coef[j])))
        else:
            res = max(res, abs(grad[j]) - lam)
    return max(res, 0.0)


def _check_lsq(problem: WeightedLsqProblem):
    X = np.asarray(problem.design, dtype=float)
    w = np.asarray(problem.w, dtype=float)
    if X.ndim != 2 or X.shape[0] != w.shape[0]:
        raise DataError("design and targets disagree in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(w))):
        raise DataError("non-finite entries in least-squares problem")
    return X, w


def _zero_col_flags(X):
    zero = np.flatnonzero(~np.any(X != 0, axis=0))
    return tuple(f"zero_column:{j}" for j in zero)


def solve_lasso_lsq(problem: WeightedLsqProblem, init=None, tol=TOL, track=False) -> PenalizedFit:
    if problem.penalty.kind != "lasso":
        raise DataError("solve_lasso_lsq requires a lasso penalty")
    return _solve_enet_core(problem, problem.penalty.lam, 0.0, init, tol, track, rescale=False)


def solve_elastic_net_lsq(problem: WeightedLsqProblem, init=None, tol=TOL, track=False) -> PenalizedFit:
    """Inner problem sum (w - x'theta)^2 + lam1 |theta|_1 + lam2 |theta|^2, output scaled by 1 + lam2.

    ``init`` is on the inner (unscaled) coefficient scale.
    """
    if problem.penalty.kind != "elastic_net":
        raise DataError("solve_elastic_net_lsq requires an elastic_net penalty")
    return _solve_enet_core(problem, problem.penalty.lam, problem.penalty.lam2, init, tol, track,
                            rescale=True)


def _solve_enet_core(problem, lam1, lam2, init, tol, track, rescale):
    X, w = _check_lsq(problem)
    p = X.shape[1]
    G = 2.0 * (X.T @ X) + 2.0 * lam2 * np.eye(p)
    c = 2.0 * (X.T @ w)
    beta, it, done, hist = cd_quadratic(G, c, lam1, init, tol=tol, track=track)
    grad = G @ beta - c
    kkt = _lsq_kkt(grad, beta, lam1)
    kkt_tol = TOL_KKT * max(1.0, float(np.max(np.abs(c))) if p else 1.0)
    obj = float(w @ w + 0.5 * beta @ G @ beta - c @ beta + lam1 * np.abs(beta).sum())
    flags = list(_zero_col_flags(X))
    if not done:
        warnings.warn("coordinate descent hit max_iter", RuntimeWarning)
        flags.append("max_iter")
    hist = [h + w @ w for h in hist]
    if rescale:
        return _make_fit((1.0 + lam2) * beta, problem.penalty, obj, it, done, kkt, kkt_tol, flags,
                         hist, inner=beta)
    return _make_fit(beta, problem.penalty, obj, it, done, kkt, kkt_tol, flags, hist)


def solve_group_lasso_lsq(problems: Sequence[WeightedLsqProblem], lam: Optional[float] = None,
                          init=None, tol=TOL, track=False) -> PenalizedFit:
    """Group lasso over covariates: block j is the H-vector (theta_j^[1..H]).

    Returns one fit whose coef is p x H; column h is the group-h coefficient.
    """
    if not problems:
        raise DataError("no subproblems")
    X = np.asarray(problems[0].design, dtype=float)
    for pr in problems[1:]:
        if pr.design.shape != X.shape or not np.array_equal(pr.design, X):
            raise DataError("group subproblems must share the design")
    W = np.column_stack([_check_lsq(pr)[1] for pr in problems])
    penalty = problems[0].penalty
    if lam is None:
        lam = penalty.lam
    penalty = PenaltySpec.group_lasso(lam)
    p, H = X.shape[1], W.shape[1]
    G = X.T @ X
    C = X.T @ W
    Theta = np.zeros((p, H)) if init is None else np.array(init, dtype=float).reshape(p, H)
    R = C - G @ Theta
    history = []
    it = 0
    done = False
    while it < MAX_ITER:
        it += 1
        big = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = Theta[j].copy()
            g = R[j] + gjj * old
            ng = np.linalg.norm(g)
            if ng <= lam / 2.0:
                new = np.zeros(H)
            else:
                new = (1.0 - lam / (2.0 * ng)) * g / gjj
            delta = new - old
            if np.any(delta != 0):
                Theta[j] = new
                R -= np.outer(G[:, j], delta)
                big = max(big, float(np.max(np.abs(delta))))
        if track:
            history.append(_group_obj(X, W, Theta, lam))
        if big < tol:
            done = True
            break
    grad = 2.0 * (G @ Theta - C)
    kkt = 0.0
    for j in range(p):
        nj = np.linalg.norm(Theta[j])
        if nj > EPS_ACTIVE:
            kkt = max(kkt, float(np.linalg.norm(grad[j] + lam * Theta[j] / nj)))
        else:
            kkt = max(kkt, float(np.linalg.norm(grad[j])) - lam)
    kkt_tol = TOL_KKT * max(1.0, 2.0 * float(np.max(np.linalg.norm(C, axis=1))) if p else 1.0)
    flags = list(_zero_col_flags(X))
    if not done:
        flags.append("max_iter")
    return _make_fit(Theta, penalty, _group_obj(X, W, Theta, lam), it, done, max(kkt, 0.0), kkt_tol,
                     flags, history)


def _group_obj(X, W, Theta, lam):
    return float(((W - X @ Theta) ** 2).sum() + lam * np.sqrt((Theta ** 2).sum(axis=1)).sum())


def lsq_lambda_max(X, w) -> float:
    return 2.0 * float(np.max(np.abs(np.asarray(X).T @ np.asarray(w)))) if np.size(X) else 0.0


def group_lambda_max(X, W) -> float:
    return 2.0 * float(np.max(np.linalg.norm(np.asarray(X).T @ np.asarray(W), axis=1)))


# ----------------------------------------------------------------------------
# nonconvex penalty pieces


def rho(beta, penalty: PenaltySpec):
    b = np.abs(np.asarray(beta, dtype=float))
    lam = penalty.lam
    if penalty.kind == "scad":
        a = penalty.a
        return np.where(b <= lam, lam * b,
                        np.where(b <= a * lam, (2 * a * lam * b - b ** 2 - lam ** 2) / (2 * (a - 1)),
                                 lam ** 2 * (a + 1) / 2))
    if penalty.kind == "mcplus":
        g = penalty.gamma_mc
        return np.where(b <= g * lam, lam * b - b ** 2 / (2 * g), g * lam ** 2 / 2)
    return lam * b


def rho_prime(beta, penalty: PenaltySpec):
    """Derivative of rho in |b| (non-negative)."""
    b = np.abs(np.asarray(beta, dtype=float))
    lam = penalty.lam
    if penalty.kind == "scad":
        a = penalty.a
        return np.where(b <= lam, lam, np.maximum(a * lam - b, 0.0) / (a - 1))
    if penalty.kind == "mcplus":
        return np.maximum(lam - b / penalty.gamma_mc, 0.0)
    return np.full_like(b, lam)


def rho_second(beta, penalty: PenaltySpec):
    b = np.abs(np.asarray(beta, dtype=float))
    lam = penalty.lam
    if penalty.kind == "scad":
        a = penalty.a
        return np.where((b > lam) & (b <= a * lam), -1.0 / (a - 1), 0.0)
    if penalty.kind == "mcplus":
        return np.where(b <= penalty.gamma_mc * lam, -1.0 / penalty.gamma_mc, 0.0)
    return np.zeros_like(b)


# ----------------------------------------------------------------------------
# GLM


@dataclass
class _Stacked:
    X: np.ndarray
    r: np.ndarray
    v: np.ndarray
    n: int
    family: ModelFamily

    @property
    def phi(self):
        return self.family.dispersion

    def eta(self, beta):
        return self.X @ beta

    def cumulant(self, eta):
        if self.family.tag == "binomial_logit":
            e = np.clip(eta, -ETA_MAX, ETA_MAX)
            return self.family.m * np.logaddexp(0.0, e), self.family.m * expit(e), \
                self.family.m * expit(e) * (1.0 - expit(e))
        return 0.5 * eta ** 2, eta, np.ones_like(eta)

    def loss(self, beta):
        eta = self.eta(beta)
        b, _, _ = self.cumulant(eta)
        return -float(np.sum(self.r * eta - self.v * b)) / (self.n * self.phi)

    def grad_hess(self, beta):
        eta = self.eta(beta)
        _, b1, b2 = self.cumulant(eta)
        g = -self.X.T @ (self.r - self.v * b1) / (self.n * self.phi)
        Hm = (self.X * (self.v * b2)[:, None]).T @ self.X / (self.n * self.phi)
        return g, Hm, eta


def stack_glm(problem: GlmProblem) -> _Stacked:
    D = np.asarray(problem.design, dtype=float)
    n, H, d = D.shape
    A = np.asarray(problem.weights, dtype=float)
    if A.shape != (n, H):
        raise DataError("weights must be n x H")
    if not np.all(np.isfinite(A)) or np.any(A < 0):
        raise DataError("observation weights must be finite and non-negative")
    y = np.asarray(problem.y, dtype=float)
    r = A * y[:, None]
    v = A.copy()
    if problem.aug_weights is not None:
        B = np.asarray(problem.aug_weights, dtype=float)
        Yh = np.asarray(problem.aug_response, dtype=float)
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(Yh))):
            raise DataError("non-finite augmentation terms")
        r = r + B * Yh
        v = v + B
    X = D.reshape(n * H, d)
    r = r.reshape(-1)
    v = v.reshape(-1)
    keep = (v != 0) | (r != 0)
    return _Stacked(X[keep], r[keep], v[keep], n, problem.family)


def _convex_pen(beta, penalty, groups):
    if penalty.kind == "group_lasso":
        return penalty.lam * sum(np.linalg.norm(beta[groups == g]) for g in np.unique(groups))
    if penalty.kind == "elastic_net":
        return penalty.lam * np.abs(beta).sum() + penalty.lam2 * beta @ beta
    return penalty.lam * np.abs(beta).sum()


def glm_lambda_max(problem: GlmProblem) -> float:
    st = stack_glm(problem)
    g, _, _ = st.grad_hess(np.zeros(problem.dim))
    if problem.penalty.kind == "group_lasso":
        groups = problem.penalty.group_index(problem.dim)
        return float(max(np.linalg.norm(g[groups == k]) for k in np.unique(groups)))
    return float(np.max(np.abs(g)))


def _prox_newton(st: _Stacked, penalty: PenaltySpec, lam_vec, groups, beta, tol, max_iter):
    d = st.X.shape[1]
    l2 = penalty.lam2 if penalty.kind == "elastic_net" else 0.0

    def pen(b):
        if penalty.kind == "group_lasso":
            return _convex_pen(b, penalty, groups)
        return float(np.sum(lam_vec * np.abs(b)) + l2 * b @ b)

    F = st.loss(beta) + pen(beta)
    history = [F]
    done = False
    it = 0
    clamped = False
    while it < max_iter:
        it += 1
        g, Hm, eta = st.grad_hess(beta)
        if np.any(np.abs(eta) >= ETA_MAX) and st.family.tag == "binomial_logit":
            clamped = True
        G = Hm + 2.0 * l2 * np.eye(d)
        c = Hm @ beta - g
        if penalty.kind == "group_lasso":
            new, _, _, _ = bcd_quadratic(G, c, penalty.lam, groups, beta, tol=tol * 1e-2)
        else:
            new, _, _, _ = cd_quadratic(G, c, lam_vec, beta, tol=tol * 1e-2)
        step = new - beta
        if np.max(np.abs(step), initial=0.0) < tol:
            done = True
            break
        delta = g @ step + pen(new) - pen(beta)
        t = 1.0
        while True:
            cand = beta + t * step
            Fc = st.loss(cand) + pen(cand)
            if Fc <= F + 1e-4 * t * min(delta, 0.0) or t < 1e-12:
                break
            t *= 0.5
        if Fc > F:
            done = True
            break
        beta, F = cand, Fc
        history.append(F)
    return beta, F, it, done, history, clamped


def _glm_kkt(st, beta, penalty, lam_vec, groups):
    g, _, _ = st.grad_hess(beta)
    if penalty.kind == "elastic_net":
        g = g + 2.0 * penalty.lam2 * beta
    res = 0.0
    if penalty.kind == "group_lasso":
        for k in np.unique(groups):
            idx = groups == k
            nb = np.linalg.norm(beta[idx])
            if nb > EPS_ACTIVE:
                res = max(res, float(np.linalg.norm(g[idx] + penalty.lam * beta[idx] / nb)))
            else:
                res = max(res, float(np.linalg.norm(g[idx])) - penalty.lam)
    else:
        for j in range(len(beta)):
            if abs(beta[j]) > EPS_ACTIVE:
                res = max(res, abs(g[j] + lam_vec[j] * np.sign(beta[j])))
            else:
                res = max(res, abs(g[j]) - lam_vec[j])
    return max(res, 0.0)


def solve_penalized_glm(problem: GlmProblem, init=None, tol=TOL, max_iter=500) -> PenalizedFit:
    """Proximal Newton; SCAD/MC+ by local linear approximation started at the lasso fit."""
    st = stack_glm(problem)
    d = problem.dim
    penalty = problem.penalty
    groups = penalty.group_index(d) if penalty.kind == "group_lasso" else None
    flags = []
    col_all = np.any(np.asarray(problem.design).reshape(-1, d) != 0, axis=0)
    col_w = (st.v[:, None] * st.X ** 2).sum(axis=0)
    zero_cols = ~col_all
    if np.any(col_all & (np.abs(col_w) == 0)):
        raise SolverError("unidentifiable block: coefficient has no positive weight")
    for j in np.flatnonzero(zero_cols):
        flags.append(f"zero_column:{j}")
    beta = np.zeros(d) if init is None else np.array(init, dtype=float)
    g0, _, _ = st.grad_hess(np.zeros(d))
    kkt_tol = TOL_KKT * max(1.0, float(np.max(np.abs(g0))))

    if penalty.kind in ("scad", "mcplus"):
        lam_vec = np.full(d, penalty.lam)
        beta, F, it, done, hist, clamped = _prox_newton(st, PenaltySpec.lasso(penalty.lam), lam_vec,
                                                        None, beta, tol, max_iter)
        total = it
        for _ in range(200):
            lam_vec = rho_prime(beta, penalty)
            new, F, it, done, h2, c2 = _prox_newton(st, PenaltySpec.lasso(penalty.lam), lam_vec,
                                                    None, beta, tol, max_iter)
            clamped = clamped or c2
            total += it
            change = np.max(np.abs(new - beta), initial=0.0)
            beta = new
            hist.append(st.loss(beta) + float(np.sum(rho(beta, penalty))))
            if change < tol:
                break
        else:
            done = False
        obj = st.loss(beta) + float(np.sum(rho(beta, penalty)))
        kkt = _glm_kkt(st, beta, penalty, rho_prime(beta, penalty), None)
    else:
        lam_vec = np.full(d, penalty.lam)
        beta, obj, total, done, hist, clamped = _prox_newton(st, penalty, lam_vec, groups, beta, tol,
                                                             max_iter)
        kkt = _glm_kkt(st, beta, penalty, lam_vec, groups)
    beta[zero_cols] = 0.0
    if clamped:
        warnings.warn("linear predictor reached the clamp |eta| = 30", RuntimeWarning)
        flags.append("eta_clamped")
    if not done:
        flags.append("max_iter")
    fit = _make_fit(beta, penalty, obj, total, done, kkt, kkt_tol, flags, hist)
    if penalty.kind == "group_lasso":
        active = tuple(int(j) for j in np.flatnonzero(np.abs(beta) > EPS_ACTIVE))
        fit = PenalizedFit(fit.coef, active, np.sign(beta[list(active)]), fit.objective_value,
                           fit.iterations, fit.converged, penalty, fit.kkt_residual, fit.kkt_tol,
                           fit.flags, fit.history)
    return fit
