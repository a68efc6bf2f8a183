"""Immutable data containers and validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class DataError(ValueError):
    """Raised when an input violates a container invariant."""


def _frozen(a, dtype=float, ndim=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(len(arr), 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    h_count: int
    m: Optional[int] = None
    x_names: Tuple[str, ...] = ()
    z_names: Tuple[str, ...] = ()

    @classmethod
    def build(cls, y, t, x, z=None, h_count=None, m=None, x_names=(), z_names=()):
        y = _frozen(y)
        t_arr = np.asarray(t)
        if t_arr.size and not np.all(np.isfinite(t_arr.astype(float))):
            raise DataError("non-finite group label")
        if t_arr.size and np.any(t_arr.astype(float) != np.round(t_arr.astype(float))):
            raise DataError("group label out of range")
        t = _frozen(t_arr, dtype=np.int64)
        x = _frozen(x, ndim=2)
        if z is None:
            z = np.zeros((len(y), 0))
        z = _frozen(z, ndim=2)
        if h_count is None:
            h_count = int(t.max()) if t.size else 1
        ds = cls(y, t, x, z, int(h_count), m, tuple(x_names), tuple(z_names))
        validate(ds)
        return ds

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    def indicators(self) -> np.ndarray:
        """n x H 0/1 matrix; built on demand."""
        return (self.t[:, None] == np.arange(1, self.h_count + 1)[None, :]).astype(float)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset.build(self.y[mask], self.t[mask], self.x[mask], self.z[mask],
                             self.h_count, self.m, self.x_names, self.z_names)


def validate(dataset: Dataset) -> None:
    n = len(dataset.y)
    if n == 0:
        raise DataError("empty dataset")
    if dataset.h_count < 1:
        raise DataError("group count must be at least 1")
    for name, arr in (("t", dataset.t), ("x", dataset.x), ("z", dataset.z)):
        if arr.shape[0] != n:
            raise DataError(f"dimension mismatch: {name} has {arr.shape[0]} rows, y has {n}")
    if dataset.x.ndim != 2 or dataset.z.ndim != 2:
        raise DataError("dimension mismatch: x and z must be matrices")
    if np.any((dataset.t < 1) | (dataset.t > dataset.h_count)):
        raise DataError("group label out of range")
    if not np.all(np.isfinite(dataset.y)):
        raise DataError("non-finite outcome")
    if not np.all(np.isfinite(dataset.x)):
        raise DataError("non-finite covariate")
    if not np.all(np.isfinite(dataset.z)):
        raise DataError("non-finite confounder")
    if dataset.m is not None:
        if int(dataset.m) < 1:
            raise DataError("trials m must be a positive integer")
        if np.any((dataset.y < 0) | (dataset.y > dataset.m)):
            raise DataError("binomial outcome outside 0..m")


def group_indicator(dataset: Dataset, h: int) -> np.ndarray:
    if not 1 <= h <= dataset.h_count:
        raise DataError("group index out of range")
    return (dataset.t == h).astype(np.int64)


@dataclass(frozen=True)
class ContrastSpec:
    c: Tuple[float, ...]

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise DataError("contrast must be a non-empty vector")
        if c.size > 1 and abs(c.sum()) > 1e-10:
            raise DataError("contrast weights must sum to 0")
        if abs((c ** 2).sum() - 1.0) > 1e-10:
            raise DataError("contrast weights must have unit squared norm")
        object.__setattr__(self, "c", tuple(float(v) for v in c))

    @classmethod
    def two_group(cls) -> "ContrastSpec":
        r = 1.0 / math.sqrt(2.0)
        return cls((-r, r))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.c)


@dataclass(frozen=True)
class ModelFamily:
    """gaussian (sigma2 known or None for unknown) or binomial_logit (m trials)."""

    tag: str
    sigma2: Optional[float] = None
    m: Optional[int] = None

    def __post_init__(self):
        if self.tag == "gaussian":
            if self.sigma2 is not None and not self.sigma2 > 0:
                raise DataError("sigma2 must be positive")
        elif self.tag == "binomial_logit":
            if self.m is None or int(self.m) < 1:
                raise DataError("binomial trials m must be >= 1")
        else:
            raise DataError(f"unsupported family: {self.tag}")

    @classmethod
    def gaussian(cls, sigma2: Optional[float] = None) -> "ModelFamily":
        return cls("gaussian", sigma2=sigma2)

    @classmethod
    def binomial(cls, m: int = 1) -> "ModelFamily":
        return cls("binomial_logit", m=int(m))

    @property
    def dispersion(self) -> float:
        if self.tag == "binomial_logit":
            return 1.0
        if self.sigma2 is None:
            raise DataError("sigma2 unresolved")
        return float(self.sigma2)


PENALTY_KINDS = ("lasso", "group_lasso", "elastic_net", "scad", "mcplus")


@dataclass(frozen=True)
class PenaltySpec:
    kind: str
    lam: float
    lam2: float = 0.0
    a: float = 3.7
    gamma_mc: float = 3.0
    groups: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise DataError(f"unknown penalty kind: {self.kind}")
        if not (self.lam >= 0 and self.lam2 >= 0):
            raise DataError("tuning values must be non-negative")
        if self.kind == "scad" and not self.a > 2:
            raise DataError("scad requires a > 2")
        if self.kind == "mcplus" and not self.gamma_mc > 1:
            raise DataError("mcplus requires gamma > 1")
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))

    @classmethod
    def lasso(cls, lam):
        return cls("lasso", float(lam))

    @classmethod
    def group_lasso(cls, lam, groups=None):
        return cls("group_lasso", float(lam), groups=groups)

    @classmethod
    def elastic_net(cls, lam1, lam2):
        return cls("elastic_net", float(lam1), lam2=float(lam2))

    @classmethod
    def scad(cls, lam, a=3.7):
        return cls("scad", float(lam), a=float(a))

    @classmethod
    def mcplus(cls, lam, gamma_mc=3.0):
        return cls("mcplus", float(lam), gamma_mc=float(gamma_mc))

    def with_lam(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.kind, float(lam), self.lam2, self.a, self.gamma_mc, self.groups)

    def group_index(self, dim: int) -> np.ndarray:
        """0-based group id per coefficient; singletons when no map is given."""
        if self.groups is None:
            return np.arange(dim)
        g = np.asarray(self.groups)
        if g.size != dim:
            raise DataError("group map does not cover the coefficient vector")
        return g

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lambda": self.lam}
        if self.kind == "elastic_net":
            d["lambda2"] = self.lam2
        if self.kind == "scad":
            d["a"] = self.a
        if self.kind == "mcplus":
            d["gamma"] = self.gamma_mc
        if self.groups is not None:
            d["groups"] = list(self.groups)
        return d


@dataclass(frozen=True)
class Standardizer:
    """Column centering/scaling record so coefficients map back to raw units."""

    center: np.ndarray
    scale: np.ndarray
    degenerate: Tuple[bool, ...] = field(default=())

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        degen = tuple(bool(s == 0) for s in sd)
        sd = np.where(sd == 0, 1.0, sd)
        return cls(mu, sd, degen)

    def transform(self, x) -> np.ndarray:
        out = (np.asarray(x, dtype=float) - self.center) / self.scale
        out[:, np.asarray(self.degenerate, dtype=bool)] = 0.0
        return out

    def coef_to_raw(self, coef) -> np.ndarray:
        return np.asarray(coef) / self.scale


def stack_designs(x: np.ndarray, h_count: int) -> np.ndarray:
    """Block design: row (i, h) carries x_i in the h-th coefficient block."""
    n, p = x.shape
    out = np.zeros((n, h_count, p * h_count))
    for h in range(h_count):
        out[:, h, h * p:(h + 1) * p] = x
    return out

