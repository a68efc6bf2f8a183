"""Data-generating processes, Monte Carlo studies and the replicate scheduler.

Three designs are provided:

* ``GaussianContrastDGP``: two groups, x ~ N(0, I_p), z ~ N(0, 1), P(t = 1 | z) = logistic(z),
  y^[h] = x'theta^[h] + z + eps, theta^[2] = -theta^[1]; the propensity is known.
* ``LogitGlmDGP``: H groups, binomial outcomes with m trials, softmax assignment driven by
  z_vec = (z, (z^2 - 1)/sqrt(2)); nuisance models are fitted on the scalar z.
* ``GaussianGlmDGP``: as above with gaussian outcomes of unit noise variance.

Every replicate draws from its own generator seeded by (seed, replicate index), so results do
not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax

from . import criteria as C
from .data import ContrastSpec, Dataset, ModelFamily, PenaltySpec
from .estimators import glm_design, pseudo_outcomes
from .nuisance import KnownPropensity, fit_outcome_nuisance, fit_propensity
from .selection import Pipeline, choose, fit_path, lambda_grid

MISSPEC = ("none", "treatment", "outcome", "both")
_MISSPEC_ALIASES = {"potential": "treatment", "propensity": "treatment"}


@dataclass(frozen=True)
class GaussianContrastDGP:
    p: int
    n: int
    theta1: float
    theta2: float
    sigma2: float = 1.0

    kind = "gaussian_contrast"

    def label(self) -> str:
        return f"({self.p},{self.n},{self.theta1:g},{self.theta2:g})"

    def theta_groups(self) -> np.ndarray:
        q = self.p // 4
        th = np.zeros(self.p)
        th[:q] = self.theta1
        th[q:2 * q] = self.theta2
        return np.vstack([th, -th])

    def truth(self) -> np.ndarray:
        c = ContrastSpec.two_group().array
        return c @ self.theta_groups()


def _beta_groups(p: int, h_count: int, b: float, kron: bool) -> np.ndarray:
    base = np.array([[2 * b, 0.0], [0.0, b], [-b, 0.0], [0.0, -2 * b]])
    rows = np.array([base[h % 4] for h in range(h_count)])
    if kron:
        reps = max(1, p // 2)
        return np.repeat(rows, reps, axis=1)[:, :p]
    out = np.zeros((h_count, p))
    for j in range(p):
        out[:, j] = rows[:, j % 2]
    return out


@dataclass(frozen=True)
class LogitGlmDGP:
    p: int
    h_count: int
    n: int
    m: int
    beta: float
    alpha: float
    gamma: float
    misspec: str = "none"

    kind = "logit_glm"

    def __post_init__(self):
        object.__setattr__(self, "misspec", _MISSPEC_ALIASES.get(self.misspec, self.misspec))
        if self.misspec not in MISSPEC:
            raise ValueError(f"unknown misspecification: {self.misspec}")

    def label(self) -> str:
        return (f"({self.p},{self.h_count},{self.n},{self.m})"
                f"({self.beta:g},{self.alpha:g},{self.gamma:g}){self.misspec}")

    def beta_groups(self) -> np.ndarray:
        return _beta_groups(self.p, self.h_count, self.beta, kron=False)

    def truth(self) -> np.ndarray:
        return self.beta_groups().reshape(-1)

    def family(self) -> ModelFamily:
        return ModelFamily.binomial(self.m)


@dataclass(frozen=True)
class GaussianGlmDGP:
    p: int
    h_count: int
    n: int
    beta: float
    alpha: float
    gamma: float
    misspec: str = "none"

    kind = "gaussian_glm"

    def __post_init__(self):
        object.__setattr__(self, "misspec", _MISSPEC_ALIASES.get(self.misspec, self.misspec))
        if self.misspec not in MISSPEC:
            raise ValueError(f"unknown misspecification: {self.misspec}")

    def label(self) -> str:
        return (f"({self.p},{self.h_count},{self.n})"
                f"({self.beta:g},{self.alpha:g},{self.gamma:g}){self.misspec}")

    def beta_groups(self) -> np.ndarray:
        return _beta_groups(self.p, self.h_count, self.beta, kron=True)

    def truth(self) -> np.ndarray:
        return self.beta_groups().reshape(-1)

    def gamma_vec(self) -> np.ndarray:
        g = self.gamma
        return np.array([g, g]) if self.misspec in ("outcome", "both") else np.array([g, 0.0])

    def family(self) -> ModelFamily:
        return ModelFamily.gaussian(1.0 + float(self.gamma_vec() @ self.gamma_vec()))


DGP = Union[GaussianContrastDGP, LogitGlmDGP, GaussianGlmDGP]


@dataclass
class Truth:
    coef: np.ndarray
    e: np.ndarray
    potential: np.ndarray
    mean_w: Optional[np.ndarray] = None


def _z_vec(z):
    return np.column_stack([z, (z ** 2 - 1.0) / math.sqrt(2.0)])


def generate(dgp: DGP, rng: np.random.Generator) -> Tuple[Dataset, Truth]:
    n, p = dgp.n, dgp.p
    x = rng.standard_normal((n, p))
    z = rng.standard_normal(n)
    if isinstance(dgp, GaussianContrastDGP):
        e1 = expit(z)
        t = np.where(rng.random(n) < e1, 1, 2)
        th = dgp.theta_groups()
        eps = rng.standard_normal(n) * math.sqrt(dgp.sigma2)
        mean_pot = x @ th.T + z[:, None]
        pot = mean_pot + eps[:, None]
        y = pot[np.arange(n), t - 1]
        e = np.column_stack([e1, 1.0 - e1])
        c = ContrastSpec.two_group().array
        T = (t[:, None] == np.array([1, 2])[None, :]).astype(float)
        mean_w = (T * c[None, :] * mean_pot / e).sum(axis=1)
        ds = Dataset.build(y, t, x, z[:, None], 2)
        return ds, Truth(dgp.truth(), e, pot, mean_w)
    H = dgp.h_count
    zv = _z_vec(z)
    a = dgp.alpha
    avec = np.array([a, a]) if dgp.misspec in ("treatment", "both") else np.array([a, 0.0])
    e = softmax(np.outer(zv @ avec, np.arange(H)), axis=1)
    u = rng.random(n)
    t = 1 + np.minimum((u[:, None] > np.cumsum(e, axis=1)).sum(axis=1), H - 1)
    B = dgp.beta_groups()
    if isinstance(dgp, LogitGlmDGP):
        gvec = np.array([dgp.gamma, dgp.gamma]) if dgp.misspec in ("outcome", "both") \
            else np.array([dgp.gamma, 0.0])
        lin = x @ B.T + (zv @ gvec)[:, None]
        pot = rng.binomial(dgp.m, expit(lin)).astype(float)
        m = dgp.m
    else:
        lin = x @ B.T + (zv @ dgp.gamma_vec())[:, None]
        pot = lin + rng.standard_normal((n, H))
        m = None
    y = pot[np.arange(n), t - 1]
    ds = Dataset.build(y, t, x, z[:, None], H, m=m)
    return ds, Truth(dgp.truth(), e, pot)


# ----------------------------------------------------------------------------
# scheduler


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def worker_count(requested: Optional[int] = None) -> int:
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("SCS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, int(n))


def _call(args):
    task, config, index = args
    return task(config, index)


def replicate_scheduler(config, task: Callable, reps: int, workers: Optional[int] = None) -> list:
    """Run ``task(config, index)`` for every replicate; results ordered by index."""
    jobs = [(task, config, i) for i in range(reps)]
    n = worker_count(workers)
    if n <= 1 or reps <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(_call, jobs, chunksize=max(1, reps // (4 * n))))


# ----------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class SimulationConfig:
    dgp: DGP
    reps: int = 200
    seed: int = 20240101
    n_points: int = 50
    ratio: float = 1e-3
    bucket_rule: str = "first"

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.bucket_rule not in BUCKET_RULES:
            raise ValueError(f"unknown bucket rule: {self.bucket_rule}")


@dataclass
class Row:
    setting: str
    criterion: str
    statistic: str
    mean: float
    sd: float
    n_reps: int


@dataclass
class SimulationResult:
    rows: List[Row]
    config: dict = field(default_factory=dict)

    def get(self, criterion: str, statistic: str, setting: Optional[str] = None) -> Optional[Row]:
        for r in self.rows:
            if r.criterion == criterion and r.statistic == statistic and \
                    (setting is None or r.setting == setting):
                return r
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "criterion", "statistic", "mean", "sd", "n_reps"])
        for r in self.rows:
            w.writerow([r.setting, r.criterion, r.statistic, _fmt(r.mean), _fmt(r.sd), r.n_reps])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": [asdict(r) for r in self.rows]}


def _fmt(v: float) -> str:
    if v is None or not np.isfinite(v):
        return "nan"
    return f"{v:.6f}"


def _gaussian_setup(ds, truth, dgp, kind="lasso"):
    return Pipeline("ipw-gaussian", ds, KnownPropensity(truth.e), PenaltySpec(kind, 0.0),
                    contrast=ContrastSpec.two_group(), noise=C.NoiseSpec(dgp.sigma2))


def _glm_setup(ds, dgp):
    fam = dgp.family()
    prop = fit_propensity(ds)
    out = fit_outcome_nuisance(ds, ModelFamily.gaussian(1.0) if fam.tag == "gaussian" else fam)
    D = glm_design(ds)
    ipw = Pipeline("ipw-glm", ds, prop, PenaltySpec.lasso(0.0), family=fam, design=D)
    dr = Pipeline("dr-glm", ds, prop, PenaltySpec.lasso(0.0), family=fam, outcome=out, design=D)
    return ipw, dr


def full_data_gof(beta, pot, x_design, family) -> float:
    """-2 sum_i sum_h l(y_i^[h]; beta): the expectation of gof on an independent copy."""
    eta = x_design @ beta
    return float(-2.0 * np.sum(C.loglik(family, pot, eta)))


BUCKET_RULES = ("first", "last", "mean")


def bucket_width(dgp: DGP) -> int:
    """Active-size step per reported column; eight columns span the full model."""
    dim = dgp.p if isinstance(dgp, GaussianContrastDGP) else dgp.p * dgp.h_count
    return max(1, dim // 8)


def _bucket(sizes: Sequence[int], values: Dict[str, list], width: int, rule: str) -> Dict[str, Dict[int, float]]:
    out = {k: {} for k in values}
    for j in range(9):
        idx = [i for i, s in enumerate(sizes) if s == j * width]
        if not idx:
            continue
        for k, v in values.items():
            if rule == "first":
                out[k][j] = v[idx[0]]
            elif rule == "last":
                out[k][j] = v[idx[-1]]
            else:
                out[k][j] = float(np.mean([v[i] for i in idx]))
    return out


def bias_replicate(config: SimulationConfig, index: int) -> dict:
    """Per active-size bucket: criterion penalty terms and the true-bias oracle."""
    dgp = config.dgp
    rng = replicate_rng(config.seed, index)
    ds, truth = generate(dgp, rng)
    width = bucket_width(dgp)
    if isinstance(dgp, GaussianContrastDGP):
        pipe = _gaussian_setup(ds, truth, dgp)
        fits = fit_path(pipe, lambda_grid(pipe, config.n_points, config.ratio))
        w = pseudo_outcomes(ds, pipe.contrast, truth.e)
        vals = {"ipcp": [pipe.evaluate("ipcp", f).penalty for f in fits],
                "true": [float(2.0 * (w - truth.mean_w) @ (ds.x @ f.coef)) for f in fits],
                "qicw": [2.0 * f.active_size * dgp.sigma2 for f in fits]}
        return _bucket([f.active_size for f in fits], vals, width, config.bucket_rule)
    copy_ds, copy_truth = generate(dgp, rng)
    ipw, dr = _glm_setup(ds, dgp)
    fam = ipw.family
    Dc = glm_design(copy_ds)
    out = {}
    for name, pipe, true_name in (("ipic", ipw, "true1"), ("dric", dr, "true2")):
        fits = fit_path(pipe, lambda_grid(pipe, config.n_points, config.ratio))
        e_hat = pipe.propensity.probs(ds)
        vals = {name: [pipe.evaluate(name, f).penalty for f in fits],
                true_name: [full_data_gof(f.coef, copy_truth.potential, Dc, fam)
                            - C.glm_gof(f.coef, ds, fam, e_hat, pipe.design) for f in fits]}
        if name == "ipic":
            vals["qicw"] = [2.0 * f.active_size for f in fits]
        out.update(_bucket([f.active_size for f in fits], vals, width, config.bucket_rule))
    return out


def _agg(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan"), 0
    sd = float(v.std(ddof=1)) if v.size > 1 else float("nan")
    return float(v.mean()), sd, int(v.size)


def aggregate_bias(setting: str, results: Sequence[dict], max_bucket: int) -> List[Row]:
    rows = []
    names = list(results[0].keys()) if results else []
    for name in names:
        stats = {}
        for j in range(max_bucket + 1):
            stats[j] = _agg([r[name][j] for r in results if j in r[name]])
            rows.append(Row(setting, name, f"bucket_{j}", *stats[j]))
        for j in range(1, max_bucket + 1):
            (m1, s1, n1), (m0, s0, n0) = stats[j], stats[j - 1]
            if n1 == 0 or n0 == 0:
                rows.append(Row(setting, name, f"inc_{j}", float("nan"), float("nan"), 0))
                continue
            se = math.sqrt((s1 ** 2 / n1 if n1 > 1 else 0.0) + (s0 ** 2 / n0 if n0 > 1 else 0.0))
            rows.append(Row(setting, name, f"inc_{j}", m1 - m0, se, min(n1, n0)))
    return rows


def run_bias_study(config: SimulationConfig, workers: Optional[int] = None) -> SimulationResult:
    res = replicate_scheduler(config, bias_replicate, config.reps, workers)
    return SimulationResult(aggregate_bias(config.dgp.label(), res, 8), _config_dict(config, "bias"))


def _split_errors(coef, truth):
    nz = truth != 0
    act = np.abs(coef) > 1e-8
    err = (coef - truth) ** 2
    return {"p1": float(np.sum(act & nz)), "p2": float(np.sum(act & ~nz)),
            "p": float(np.sum(act)),
            "rmse1": 10 * math.sqrt(err[nz].sum()) if nz.any() else float("nan"),
            "rmse2": 10 * math.sqrt(err[~nz].sum()) if (~nz).any() else float("nan"),
            "rmse": 10 * math.sqrt(err.sum())}


def selection_replicate(config: SimulationConfig, index: int) -> dict:
    dgp = config.dgp
    rng = replicate_rng(config.seed, index)
    ds, truth = generate(dgp, rng)
    out = {}
    if isinstance(dgp, GaussianContrastDGP):
        pipes = {"ipw": _gaussian_setup(ds, truth, dgp)}
        plan = (("qicw", "ipw"), ("ipcp", "ipw"))
    else:
        ipw, dr = _glm_setup(ds, dgp)
        pipes = {"ipw": ipw, "dr": dr}
        plan = (("qicw", "ipw"), ("ipic", "ipw"), ("dric", "dr"))
    paths = {}
    for key, pipe in pipes.items():
        grid = lambda_grid(pipe, config.n_points, config.ratio)
        paths[key] = fit_path(pipe, grid)
    for crit, key in plan:
        fits = paths[key]
        reports = [pipes[key].evaluate(crit, f) for f in fits]
        try:
            k = choose(reports)
        except ArithmeticError:
            out[crit] = None
            continue
        out[crit] = _split_errors(np.asarray(fits[k].coef), truth.coef)
    return out


def run_selection_study(config: SimulationConfig, workers: Optional[int] = None) -> SimulationResult:
    res = replicate_scheduler(config, selection_replicate, config.reps, workers)
    setting = config.dgp.label()
    rows = []
    for crit in res[0].keys():
        ok = [r[crit] for r in res if r[crit] is not None]
        for stat in ("p1", "rmse1", "p2", "rmse2", "p", "rmse"):
            rows.append(Row(setting, crit, stat, *_agg([o[stat] for o in ok])))
        rows.append(Row(setting, crit, "failures", float(len(res) - len(ok)), 0.0, len(res)))
    return SimulationResult(rows, _config_dict(config, "selection"))


def _config_dict(config: SimulationConfig, study: str) -> dict:
    d = {"study": study, "dgp_kind": config.dgp.kind, "dgp": asdict(config.dgp), "reps": config.reps,
         "seed": config.seed, "n_points": config.n_points, "ratio": config.ratio,
         "bucket_rule": config.bucket_rule}
    return d


# ----------------------------------------------------------------------------
# SURE check with a fixed lambda grid


def sure_replicate(args, index: int) -> np.ndarray:
    """Rows per lambda: (IPCp, risk plug-in, model-free constant)."""
    dgp, lams, seed = args
    ds, truth = generate(dgp, replicate_rng(seed, index))
    pipe = _gaussian_setup(ds, truth, dgp)
    w = pseudo_outcomes(ds, pipe.contrast, truth.e)
    const = float(((w - truth.mean_w) ** 2).sum())
    out = []
    prev = None
    for lam in sorted(lams, reverse=True):
        f = pipe.fit(PenaltySpec.lasso(lam), init=None if prev is None else prev.coef)
        prev = f
        ip = pipe.evaluate("ipcp", f).total
        risk = float(((truth.mean_w - ds.x @ f.coef) ** 2).sum())
        out.append((ip, risk, const))
    return np.array(out)


def run_sure_check(dgp: GaussianContrastDGP, lams: Sequence[float], reps: int, seed: int,
                   workers: Optional[int] = None) -> np.ndarray:
    """reps x len(lams) x 3 array; lambdas in decreasing order."""
    return np.stack(replicate_scheduler((dgp, tuple(lams), seed), sure_replicate, reps, workers))


# ----------------------------------------------------------------------------
# presets


def _t1():
    return [GaussianContrastDGP(p, n, a, b) for p in (8, 16, 32) for n in (40, 120)
            for a, b in ((0.2, 0.2), (0.4, 0.0))]


def _t2():
    return [GaussianContrastDGP(p, n, th, th) for p in (8, 16, 32) for th in (0.2, 0.4)
            for n in (40, 80, 120)]


def _t3():
    L = LogitGlmDGP
    return [L(2, 4, 200, 10, 0.1, 0.1, 0.2), L(2, 4, 200, 10, 0.2, 0.1, 0.2),
            L(2, 4, 200, 10, 0.1, 0.2, 0.2), L(2, 4, 200, 10, 0.1, 0.2, 0.4),
            L(2, 4, 200, 5, 0.1, 0.2, 0.2), L(2, 4, 400, 10, 0.1, 0.1, 0.2),
            L(2, 4, 200, 10, 0.1, 0.1, 0.2, "treatment"), L(2, 4, 200, 10, 0.1, 0.1, 0.2, "outcome"),
            L(2, 4, 200, 10, 0.1, 0.1, 0.2, "both")]


def _t4():
    L = LogitGlmDGP
    return [L(2, 4, 200, 10, 0.1, 0.1, 0.2), L(2, 4, 200, 10, 0.2, 0.1, 0.2),
            L(2, 4, 200, 10, 0.1, 0.2, 0.2), L(2, 4, 200, 10, 0.1, 0.1, 0.4),
            L(2, 4, 400, 10, 0.1, 0.1, 0.2), L(2, 4, 200, 5, 0.1, 0.1, 0.2),
            L(2, 6, 200, 10, 0.1, 0.1, 0.2), L(2, 8, 200, 10, 0.1, 0.1, 0.2),
            L(4, 4, 200, 10, 0.1, 0.1, 0.2), L(2, 4, 200, 10, 0.1, 0.1, 0.2, "treatment"),
            L(2, 4, 200, 10, 0.1, 0.1, 0.2, "outcome")]


def _t6():
    G = GaussianGlmDGP
    return [G(2, 4, 200, 0.2, 0.2, 0.5), G(2, 4, 200, 0.2, 0.2, 1.0), G(2, 4, 200, 0.2, 0.1, 1.0),
            G(2, 4, 200, 0.4, 0.2, 1.0), G(2, 4, 400, 0.2, 0.2, 1.0),
            G(2, 4, 200, 0.2, 0.2, 1.0, "treatment"), G(2, 4, 200, 0.2, 0.2, 1.0, "outcome"),
            G(2, 4, 200, 0.2, 0.1, 0.5, "both"), G(2, 4, 200, 0.2, 0.2, 1.0, "both")]


def _t7():
    G = GaussianGlmDGP
    return [G(2, 4, 200, 0.2, 0.2, 1.0), G(2, 4, 200, 0.4, 0.2, 1.0), G(2, 4, 200, 0.2, 0.1, 1.0),
            G(2, 4, 200, 0.2, 0.2, 0.5), G(2, 4, 400, 0.2, 0.2, 1.0), G(2, 6, 200, 0.2, 0.2, 1.0),
            G(2, 8, 200, 0.2, 0.2, 1.0), G(4, 4, 200, 0.2, 0.2, 1.0),
            G(2, 4, 200, 0.2, 0.1, 1.0, "treatment"), G(2, 4, 200, 0.2, 0.2, 1.0, "treatment"),
            G(2, 4, 200, 0.2, 0.2, 0.5, "outcome"), G(2, 4, 200, 0.2, 0.2, 1.0, "outcome")]


PRESETS = {
    "table1": ("bias", _t1, 1000),
    "table2": ("selection", _t2, 200),
    "table3": ("bias", _t3, 200),
    "table4": ("selection", _t4, 200),
    "table6": ("bias", _t6, 200),
    "table7": ("selection", _t7, 200),
}


def run_preset(name: str, reps: Optional[int] = None, seed: int = 20240101,
               settings: Optional[Sequence[int]] = None, workers: Optional[int] = None,
               n_points: int = 50, ratio: float = 1e-3) -> SimulationResult:
    study, make, default_reps = PRESETS[name]
    dgps = make()
    if settings:
        dgps = [dgps[i] for i in settings]
    rows: List[Row] = []
    cfgs = []
    for dgp in dgps:
        cfg = SimulationConfig(dgp, reps or default_reps, seed, n_points, ratio)
        run = run_bias_study if study == "bias" else run_selection_study
        res = run(cfg, workers)
        rows.extend(res.rows)
        cfgs.append(res.config)
    return SimulationResult(rows, {"preset": name, "settings": cfgs})
