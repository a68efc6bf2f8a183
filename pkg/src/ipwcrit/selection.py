"""Criterion-driven choice of the regularization level along a lambda path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import criteria as C
from .data import ContrastSpec, DataError, Dataset, ModelFamily, PenaltySpec
from .estimators import (DrProblemSpec, IpwGaussianProblemSpec, Propensity, dr_glm_problem,
                         glm_design, group_pseudo_outcomes, ipw_gaussian_fit, ipw_glm_problem,
                         pseudo_outcomes)
from .nuisance import OutcomeNuisanceFit
from .solvers import (PenalizedFit, SolverError, glm_lambda_max, group_lambda_max, lsq_lambda_max,
                      solve_penalized_glm)

PIPELINES = ("ipw-gaussian", "ipw-glm", "dr-glm")
CRITERIA = ("qicw", "ipcp", "ipic", "dr-aic", "dric")
COMPATIBLE = {
    "qicw": ("ipw-gaussian", "ipw-glm"),
    "ipcp": ("ipw-gaussian",),
    "ipic": ("ipw-glm",),
    "dr-aic": ("dr-glm",),
    "dric": ("dr-glm",),
}


@dataclass
class Pipeline:
    """Everything needed to fit one estimator at any lambda and score it."""

    kind: str
    dataset: Dataset
    propensity: Propensity
    penalty: PenaltySpec
    contrast: Optional[ContrastSpec] = None
    family: Optional[ModelFamily] = None
    outcome: Optional[OutcomeNuisanceFit] = None
    noise: C.NoiseSpec = field(default_factory=C.NoiseSpec)
    design: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in PIPELINES:
            raise DataError(f"unknown pipeline: {self.kind}")
        if self.kind != "ipw-gaussian":
            if self.family is None:
                raise DataError("GLM pipelines need a family")
            if self.design is None:
                self.design = glm_design(self.dataset)
        if self.kind == "dr-glm" and self.outcome is None:
            raise DataError("dr-glm needs an outcome nuisance fit")

    def _glm_problem(self, penalty):
        if self.kind == "ipw-glm":
            return ipw_glm_problem(self.dataset, self.family, self.propensity, penalty, self.design)
        return dr_glm_problem(DrProblemSpec(self.dataset, self.family, self.propensity, self.outcome,
                                            penalty), self.design)

    def lambda_max(self) -> float:
        if self.kind == "ipw-gaussian":
            e = self.propensity.probs(self.dataset)
            if self.penalty.kind == "group_lasso":
                return group_lambda_max(self.dataset.x, group_pseudo_outcomes(self.dataset, e))
            return lsq_lambda_max(self.dataset.x, pseudo_outcomes(self.dataset, self.contrast, e))
        return glm_lambda_max(self._glm_problem(self.penalty))

    def fit(self, penalty: PenaltySpec, init=None) -> PenalizedFit:
        if self.kind == "ipw-gaussian":
            return ipw_gaussian_fit(IpwGaussianProblemSpec(self.dataset, self.contrast,
                                                           self.propensity, penalty), init=init)
        return solve_penalized_glm(self._glm_problem(penalty), init=init)

    def matrices(self, fit):
        mode = "dr" if self.kind == "dr-glm" else "ipw"
        return C.build_matrices(fit, self.dataset, self.family, self.propensity, self.outcome, mode,
                                self.design)

    def evaluate(self, criterion: str, fit: PenalizedFit, matrices=None) -> C.CriterionReport:
        if self.kind not in COMPATIBLE.get(criterion, ()):
            raise DataError(f"criterion {criterion} cannot be paired with pipeline {self.kind}")
        ds = self.dataset
        try:
            if criterion == "qicw":
                if self.kind == "ipw-gaussian":
                    return C.qicw(fit, ds, self.propensity, noise=self.noise, contrast=self.contrast)
                return C.qicw(fit, ds, self.propensity, self.family, design=self.design)
            if criterion == "ipcp":
                kind = fit.penalty.kind
                if kind == "group_lasso":
                    return C.ipcp_group(fit, ds, self.propensity, self.noise)
                if kind == "elastic_net":
                    return C.ipcp_enet(fit, ds, self.contrast, self.propensity, self.noise)
                return C.ipcp_lasso(fit, ds, self.contrast, self.propensity, self.noise)
            mats = matrices if matrices is not None else self.matrices(fit)
            if criterion == "ipic":
                if fit.penalty.kind in ("scad", "mcplus"):
                    return C.ipic_nonconvex(fit, ds, self.propensity, self.family, design=self.design,
                                            matrices=mats)
                return C.ipic(fit, mats, ds, self.propensity, self.family, self.design)
            if criterion == "dr-aic":
                return C.dr_aic(fit, mats, ds, self.propensity, self.family, self.design)
            return C.dric(fit, mats, ds, self.propensity, self.outcome, self.family, self.design)
        except C.CriterionFailure as exc:
            return C.failed_report(criterion.replace("-", "_"), fit, str(exc))


def lambda_grid(pipeline: Pipeline, n_points: int = 50, ratio: float = 1e-3) -> List[PenaltySpec]:
    """Log-spaced from lambda_max (all-zero fit) down to ratio * lambda_max."""
    if n_points < 1 or not 0 < ratio < 1:
        raise DataError("grid needs n_points >= 1 and 0 < ratio < 1")
    lmax = pipeline.lambda_max()
    if not lmax > 0:
        raise DataError("degenerate problem: gradient at the origin is zero")
    if n_points == 1:
        lams = [lmax]
    else:
        lams = np.exp(np.linspace(np.log(lmax), np.log(ratio * lmax), n_points))
    return [pipeline.penalty.with_lam(float(l)) for l in lams]


@dataclass
class PathEntry:
    penalty: PenaltySpec
    fit: PenalizedFit
    report: C.CriterionReport


@dataclass
class SelectionPath:
    entries: List[PathEntry]
    chosen: int
    criterion: str
    grid: dict

    @property
    def chosen_entry(self) -> PathEntry:
        return self.entries[self.chosen]

    def rows(self) -> List[dict]:
        return [{"lambda": e.penalty.lam, "active_size": e.fit.active_size, "gof": e.report.gof,
                 "penalty": e.report.penalty, "total": e.report.total, "failed": e.report.failed,
                 "chosen": i == self.chosen} for i, e in enumerate(self.entries)]


def fit_path(pipeline: Pipeline, grid: Sequence[PenaltySpec], warm: bool = True) -> List[PenalizedFit]:
    fits = []
    prev = None
    for pen in grid:
        init = None
        if warm and prev is not None:
            init = prev.inner_coef if prev.inner_coef is not None else prev.coef
        fit = pipeline.fit(pen, init=init)
        fits.append(fit)
        prev = fit
    return fits


def choose(reports: Sequence[C.CriterionReport]) -> int:
    """Index of the smallest total; ties go to the earlier (larger lambda) entry."""
    best = None
    for i, r in enumerate(reports):
        if r.failed or not np.isfinite(r.total):
            continue
        if best is None or r.total < reports[best].total:
            best = i
    if best is None:
        raise SolverError("all grid entries failed")
    return best


def select(pipeline: Pipeline, criterion: str, grid: Optional[Sequence[PenaltySpec]] = None,
           n_points: int = 50, ratio: float = 1e-3, warm: bool = True) -> SelectionPath:
    if criterion not in CRITERIA:
        raise DataError(f"unknown criterion: {criterion}")
    if pipeline.kind not in COMPATIBLE[criterion]:
        raise DataError(f"criterion {criterion} cannot be paired with pipeline {pipeline.kind}")
    if grid is None:
        grid = lambda_grid(pipeline, n_points, ratio)
    grid = sorted(grid, key=lambda g: -g.lam)
    fits = fit_path(pipeline, grid, warm)
    reports = [pipeline.evaluate(criterion, f) for f in fits]
    entries = [PathEntry(g, f, r) for g, f, r in zip(grid, fits, reports)]
    return SelectionPath(entries, choose(reports), criterion,
                         {"n_points": len(grid), "ratio": ratio, "warm": warm})
