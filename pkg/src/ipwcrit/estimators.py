"""The three estimation pipelines: Gaussian contrast IPW, IPW GLM and doubly robust GLM."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .data import ContrastSpec, DataError, Dataset, ModelFamily, PenaltySpec, stack_designs
from .nuisance import KnownPropensity, OutcomeNuisanceFit, PropensityFit
from .solvers import (GlmProblem, PenalizedFit, WeightedLsqProblem, solve_elastic_net_lsq,
                      solve_group_lasso_lsq, solve_lasso_lsq, solve_penalized_glm)

Propensity = Union[KnownPropensity, PropensityFit]
AUG_WARN = 50.0


@dataclass(frozen=True)
class IpwGaussianProblemSpec:
    dataset: Dataset
    contrast: Optional[ContrastSpec]
    propensity: Propensity
    penalty: PenaltySpec

    def __post_init__(self):
        if self.penalty.kind != "group_lasso":
            if self.contrast is None or len(self.contrast.c) != self.dataset.h_count:
                raise DataError("contrast length must equal the number of groups")


@dataclass(frozen=True)
class DrProblemSpec:
    dataset: Dataset
    family: ModelFamily
    propensity: Propensity
    outcome: OutcomeNuisanceFit
    penalty: PenaltySpec


def pseudo_outcomes(dataset: Dataset, contrast: ContrastSpec, e: np.ndarray) -> np.ndarray:
    """w_i = sum_h c^[h] t_i^[h] y_i / e_i^[h]."""
    T = dataset.indicators()
    return (T * contrast.array[None, :] / e).sum(axis=1) * dataset.y


def group_pseudo_outcomes(dataset: Dataset, e: np.ndarray) -> np.ndarray:
    """n x H matrix of t^[h] y / e^[h]."""
    return dataset.indicators() * dataset.y[:, None] / e


def ipw_gaussian_problem(spec: IpwGaussianProblemSpec):
    e = spec.propensity.probs(spec.dataset)
    if spec.penalty.kind == "group_lasso":
        W = group_pseudo_outcomes(spec.dataset, e)
        return [WeightedLsqProblem(W[:, h], spec.dataset.x, spec.penalty) for h in range(W.shape[1])]
    return WeightedLsqProblem(pseudo_outcomes(spec.dataset, spec.contrast, e), spec.dataset.x,
                              spec.penalty)


def ipw_gaussian_fit(spec: IpwGaussianProblemSpec, init=None) -> PenalizedFit:
    problem = ipw_gaussian_problem(spec)
    kind = spec.penalty.kind
    if kind == "lasso":
        return solve_lasso_lsq(problem, init=init)
    if kind == "elastic_net":
        return solve_elastic_net_lsq(problem, init=init)
    if kind == "group_lasso":
        return solve_group_lasso_lsq(problem, init=init)
    raise DataError(f"penalty {kind} is not available for the Gaussian contrast pipeline")


def glm_design(dataset: Dataset, shared: bool = False) -> np.ndarray:
    """n x H x d design; group-specific coefficient blocks unless ``shared``."""
    if shared:
        return np.repeat(np.asarray(dataset.x)[:, None, :], dataset.h_count, axis=1)
    return stack_designs(np.asarray(dataset.x), dataset.h_count)


def ipw_glm_problem(dataset, family, propensity, penalty, design=None) -> GlmProblem:
    e = propensity.probs(dataset)
    D = glm_design(dataset) if design is None else design
    return GlmProblem(D, dataset.y, dataset.indicators() / e, family, penalty)


def ipw_glm_fit(dataset: Dataset, family: ModelFamily, propensity: Propensity, penalty: PenaltySpec,
                design=None, init=None) -> PenalizedFit:
    return solve_penalized_glm(ipw_glm_problem(dataset, family, propensity, penalty, design), init=init)


def dr_glm_problem(spec: DrProblemSpec, design=None) -> GlmProblem:
    ds = spec.dataset
    e = spec.propensity.probs(ds)
    T = ds.indicators()
    A = T / e
    B = 1.0 - A
    if np.max(np.abs(B)) > AUG_WARN:
        warnings.warn("augmentation weights exceed 50 in magnitude", RuntimeWarning)
    D = glm_design(ds) if design is None else design
    return GlmProblem(D, ds.y, A, spec.family, spec.penalty, aug_weights=B,
                      aug_response=spec.outcome.cond_mean(ds.z))


def dr_glm_fit(spec: DrProblemSpec, design=None, init=None) -> PenalizedFit:
    return solve_penalized_glm(dr_glm_problem(spec, design), init=init)
