"""Command-line front end: fit, select, simulate, analyze and a synthetic job-training generator."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import criteria as C
from .data import ContrastSpec, DataError, Dataset, ModelFamily, PenaltySpec, Standardizer
from .estimators import glm_design
from .nuisance import KnownPropensity, fit_outcome_nuisance, fit_propensity
from .selection import COMPATIBLE, CRITERIA, PIPELINES, Pipeline, select
from .solvers import SolverError

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class CliInputError(DataError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: str = field(default_factory=lambda: _now())
    finished: Optional[str] = None

    def close(self) -> dict:
        self.finished = _now()
        return {"command": self.command, "config": self.config, "version": self.version,
                "seed": self.seed, "started": self.started, "finished": self.finished,
                "inputs": self.inputs}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# input


def read_table(path) -> Dict[str, np.ndarray]:
    """Header plus numeric rows; returns column name -> float array, in file order."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliInputError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise CliInputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise CliInputError(f"{path}: duplicate column names")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    cols: Dict[str, list] = {h: [] for h in header}
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise CliInputError(f"{path}: line {k} has {len(r)} fields, expected {len(header)}")
        for h, v in zip(header, r):
            try:
                cols[h].append(float(v))
            except ValueError:
                raise CliInputError(f"{path}: line {k}, column {h}: not a number: {v!r}") from None
    return {h: np.asarray(v, dtype=float) for h, v in cols.items()}


def _numbered(cols, prefix):
    names = []
    j = 1
    while f"{prefix}{j}" in cols:
        names.append(f"{prefix}{j}")
        j += 1
    return names


def load_dataset(path, trials: Optional[int] = None, groups: Optional[int] = None) -> Dataset:
    cols = read_table(path)
    for need in ("y", "t"):
        if need not in cols:
            raise CliInputError(f"missing column: {need}")
    xn, zn = _numbered(cols, "x"), _numbered(cols, "z")
    if not xn:
        raise CliInputError("missing column: x1")
    n = len(cols["y"])
    x = np.column_stack([cols[c] for c in xn])
    z = np.column_stack([cols[c] for c in zn]) if zn else np.zeros((n, 0))
    return Dataset.build(cols["y"], cols["t"], x, z, groups, trials, tuple(xn), tuple(zn))


def load_known_propensity(path, ds: Dataset) -> KnownPropensity:
    cols = read_table(path)
    names = [f"e{h}" for h in range(1, ds.h_count + 1)]
    for nm in names:
        if nm not in cols:
            raise CliInputError(f"missing column: {nm}")
    E = np.column_stack([cols[nm] for nm in names])
    if E.shape[0] != ds.n:
        raise CliInputError(f"propensity file has {E.shape[0]} rows, data has {ds.n}")
    if not np.all(np.isfinite(E)) or np.any(E <= 0) or np.any(E > 1):
        raise CliInputError("propensities must lie in (0, 1]")
    if np.max(np.abs(E.sum(axis=1) - 1.0)) > 1e-6:
        raise CliInputError("propensity rows must sum to 1")
    return KnownPropensity(E)


def _parse_contrast(text: Optional[str], h_count: int) -> ContrastSpec:
    if text is None:
        if h_count != 2:
            raise CliInputError("--contrast is required when there are more than two groups")
        return ContrastSpec.two_group()
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise CliInputError(f"bad contrast: {text!r}") from None
    if len(vals) != h_count:
        raise CliInputError("contrast length must equal the number of groups")
    return ContrastSpec(tuple(vals))


def _family(args) -> Optional[ModelFamily]:
    if args.pipeline == "ipw-gaussian":
        return None
    if args.family == "binomial":
        return ModelFamily.binomial(args.trials or 1)
    if args.sigma2 is None:
        raise CliInputError("sigma2 unresolved: pass --sigma2 for the gaussian GLM family")
    return ModelFamily.gaussian(args.sigma2)


def _penalty(kind: str, lam: float, args) -> PenaltySpec:
    if kind == "elastic_net":
        return PenaltySpec.elastic_net(lam, args.lambda2)
    if kind == "scad":
        return PenaltySpec.scad(lam, args.scad_a)
    if kind == "mcplus":
        return PenaltySpec.mcplus(lam, args.mcp_gamma)
    return PenaltySpec(kind, lam)


def build_pipeline(args, manifest: RunManifest) -> Pipeline:
    trials = args.trials if args.family == "binomial" and args.pipeline != "ipw-gaussian" else None
    if trials is None and args.family == "binomial" and args.pipeline != "ipw-gaussian":
        trials = 1
    ds = load_dataset(args.data, trials, args.groups)
    manifest.inputs[str(args.data)] = file_digest(args.data)
    if args.propensity.startswith("known:"):
        pfile = args.propensity[len("known:"):]
        prop = load_known_propensity(pfile, ds)
        manifest.inputs[pfile] = file_digest(pfile)
    elif args.propensity == "fit":
        prop = fit_propensity(ds)
    else:
        raise CliInputError("--propensity must be 'fit' or 'known:<file>'")
    fam = _family(args)
    contrast = _parse_contrast(args.contrast, ds.h_count) if args.pipeline == "ipw-gaussian" \
        and args.penalty != "group_lasso" else None
    outcome = None
    if args.pipeline == "dr-glm":
        nuis_fam = ModelFamily.gaussian(1.0) if fam.tag == "gaussian" else fam
        outcome = fit_outcome_nuisance(ds, nuis_fam)
    noise = C.NoiseSpec(args.sigma2) if args.pipeline == "ipw-gaussian" else C.NoiseSpec()
    if args.pipeline == "ipw-gaussian" and args.penalty in ("scad", "mcplus"):
        raise CliInputError(f"penalty {args.penalty} needs a GLM pipeline")
    if args.pipeline != "ipw-gaussian" and args.penalty in ("elastic_net", "group_lasso"):
        raise CliInputError(f"penalty {args.penalty} is only available for ipw-gaussian")
    return Pipeline(args.pipeline, ds, prop, _penalty(args.penalty, 0.0, args), contrast, fam,
                    outcome, noise)


def _coef_payload(fit, ds: Dataset, kind: str) -> dict:
    coef = np.asarray(fit.coef)
    out = {"coef": coef.tolist(), "active": [int(a) for a in fit.active],
           "active_size": int(fit.active_size), "converged": bool(fit.converged),
           "iterations": int(fit.iterations), "objective": float(fit.objective_value),
           "kkt_residual": float(fit.kkt_residual), "flags": list(fit.flags)}
    names = list(ds.x_names)
    if kind != "ipw-gaussian":
        out["coef_by_group"] = {f"group{h + 1}": dict(zip(names, coef.reshape(ds.h_count, -1)[h].tolist()))
                                for h in range(ds.h_count)}
    elif coef.ndim == 1:
        out["coef_by_name"] = dict(zip(names, coef.tolist()))
    return out


def _resolve_lambda(text: str, pipe: Pipeline) -> float:
    if text == "max":
        return float(pipe.lambda_max())
    try:
        lam = float(text)
    except ValueError:
        raise CliInputError(f"bad --lambda: {text!r}") from None
    if not lam >= 0:
        raise CliInputError("--lambda must be non-negative")
    return lam


def _write(text: str, out: Optional[str]):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


# ----------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    man = RunManifest("fit", _echo(args))
    pipe = build_pipeline(args, man)
    lam = _resolve_lambda(args.lam, pipe)
    pen = _penalty(args.penalty, lam, args)
    fit = pipe.fit(pen)
    report = {"pipeline": args.pipeline, "penalty": pen.to_dict(),
              **_coef_payload(fit, pipe.dataset, args.pipeline)}
    if args.criterion:
        _check_pair(args.criterion, args.pipeline)
        report["criterion"] = pipe.evaluate(args.criterion, fit).to_dict()
    report["manifest"] = man.close()
    _write(_dump(report), args.out)
    return 0


def _check_pair(criterion, pipeline):
    if pipeline not in COMPATIBLE[criterion]:
        raise CliInputError(f"criterion {criterion} cannot be paired with pipeline {pipeline}")


def cmd_select(args) -> int:
    _check_pair(args.criterion, args.pipeline)
    man = RunManifest("select", _echo(args))
    pipe = build_pipeline(args, man)
    path = select(pipe, args.criterion, n_points=args.grid_points, ratio=args.grid_ratio)
    rows = path.rows()
    chosen = path.chosen_entry
    report = {"pipeline": args.pipeline, "criterion": args.criterion, "grid": path.grid,
              "path": rows, "chosen": path.chosen, "chosen_lambda": chosen.penalty.lam,
              "chosen_fit": _coef_payload(chosen.fit, pipe.dataset, args.pipeline),
              "manifest": man.close()}
    _write(_dump(report), args.out)
    if args.table:
        Path(args.table).write_text(path_table_csv(rows), encoding="utf-8")
    return 0


def path_table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = ["lambda", "active_size", "gof", "penalty", "total", "failed", "chosen"]
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in keys])
    return buf.getvalue()


def _load_sim_config(path):
    from . import simulation as S
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliInputError(f"cannot read config {path}: {exc}") from None
    kinds = {"gaussian_contrast": S.GaussianContrastDGP, "logit_glm": S.LogitGlmDGP,
             "gaussian_glm": S.GaussianGlmDGP}
    try:
        study = cfg.pop("study")
        dgp = kinds[cfg.pop("kind")](**cfg.pop("dgp"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliInputError(f"bad simulation config: {exc}") from None
    if study not in ("bias", "selection"):
        raise CliInputError(f"unknown study: {study}")
    return study, dgp, cfg


def cmd_simulate(args) -> int:
    from . import simulation as S
    man = RunManifest("simulate", _echo(args), seed=args.seed)
    if args.preset:
        settings = _parse_settings(args.settings, S.PRESETS[args.preset][1]())
        res = S.run_preset(args.preset, args.reps, args.seed, settings, args.workers,
                           args.grid_points, args.grid_ratio)
    elif args.config:
        study, dgp, extra = _load_sim_config(args.config)
        man.inputs[str(args.config)] = file_digest(args.config)
        cfg = S.SimulationConfig(dgp, args.reps or int(extra.get("reps", 200)), args.seed,
                                 args.grid_points, args.grid_ratio)
        run = S.run_bias_study if study == "bias" else S.run_selection_study
        res = run(cfg, args.workers)
    else:
        raise CliInputError("simulate needs --preset or --config")
    _write(res.to_csv(), args.out)
    if args.json:
        payload = res.to_dict()
        payload["manifest"] = man.close()
        Path(args.json).write_text(_dump(payload), encoding="utf-8")
    return 0


def _parse_settings(text, dgps) -> Optional[List[int]]:
    if not text:
        return None
    labels = [d.label() for d in dgps]
    out = []
    for tok in text.split(";"):
        tok = tok.strip()
        if tok.isdigit() and int(tok) < len(dgps):
            out.append(int(tok))
        elif tok in labels:
            out.append(labels.index(tok))
        else:
            raise CliInputError(f"unknown setting: {tok}")
    return out


# ---- analyze


def _filters(specs) -> List[tuple]:
    out = []
    for s in specs or []:
        if "=" not in s:
            raise CliInputError(f"bad --filter {s!r}; expected col=val")
        k, v = s.split("=", 1)
        try:
            out.append((k.strip(), float(v)))
        except ValueError:
            raise CliInputError(f"bad --filter value {v!r}") from None
    return out


def _binarize(y, rule: str) -> np.ndarray:
    if rule == "nonzero":
        return (y != 0).astype(float)
    try:
        thr = float(rule)
    except ValueError:
        raise CliInputError(f"bad --binarize rule {rule!r}; use 'nonzero' or a threshold") from None
    return (y > thr).astype(float)


def cmd_analyze(args) -> int:
    man = RunManifest("analyze", _echo(args))
    cols = read_table(args.data)
    man.inputs[str(args.data)] = file_digest(args.data)
    for need in (args.treatment, args.outcome):
        if need not in cols:
            raise CliInputError(f"missing column: {need}")
    mask = np.ones(len(cols[args.outcome]), dtype=bool)
    for k, v in _filters(args.filter):
        if k not in cols:
            raise CliInputError(f"missing column: {k}")
        mask &= cols[k] == v
    if not mask.any():
        raise CliInputError("empty stratum")
    covs = args.covariates.split(",") if args.covariates else \
        [c for c in cols if c not in (args.treatment, args.outcome)]
    for c in covs:
        if c not in cols:
            raise CliInputError(f"missing column: {c}")
    conf = args.confounders.split(",") if args.confounders else covs
    for c in conf:
        if c not in cols:
            raise CliInputError(f"missing column: {c}")
    X = np.column_stack([cols[c][mask] for c in covs])
    Zr = np.column_stack([cols[c][mask] for c in conf])
    degenerate = [c for c, s in zip(covs, X.std(axis=0)) if s == 0]
    if args.standardize:
        X = Standardizer.fit(X).transform(X)
    else:
        X = np.where(X.std(axis=0) == 0, 0.0, X)
    Zs = Standardizer.fit(Zr)
    Z = np.column_stack([np.ones(mask.sum()), Zs.transform(Zr)])
    Z = Z[:, [0] + [j + 1 for j, s in enumerate(Zr.std(axis=0)) if s > 0]]
    tr = cols[args.treatment][mask]
    if not np.all(np.isin(tr, (0.0, 1.0))):
        raise CliInputError("treatment column must be 0/1")
    t = tr.astype(int) + 1
    y = cols[args.outcome][mask]
    binary = args.binarize is not None
    if binary:
        y = _binarize(y, args.binarize)
    elif args.standardize:
        sd = y.std()
        y = (y - y.mean()) / (sd if sd > 0 else 1.0)
    ds = Dataset.build(y, t, X, Z, 2, 1 if binary else None, tuple(covs))
    prop = fit_propensity(ds)
    rows = []
    report = {"n": ds.n, "mode": "binary" if binary else "continuous", "degenerate": degenerate,
              "covariates": covs, "selections": []}
    if binary:
        fam = ModelFamily.binomial(1)
        D = glm_design(ds)
        out = fit_outcome_nuisance(ds, fam)
        plan = (("qicw", Pipeline("ipw-glm", ds, prop, PenaltySpec.lasso(0), family=fam, design=D)),
                ("ipic", Pipeline("ipw-glm", ds, prop, PenaltySpec.lasso(0), family=fam, design=D)),
                ("dric", Pipeline("dr-glm", ds, prop, PenaltySpec.lasso(0), family=fam, outcome=out,
                                  design=D)))
    else:
        noise = C.NoiseSpec(args.sigma2)
        pipe = Pipeline("ipw-gaussian", ds, prop, PenaltySpec.lasso(0),
                        contrast=ContrastSpec.two_group(), noise=noise)
        plan = (("qicw", pipe), ("ipcp", pipe))
    for crit, pipe in plan:
        path = select(pipe, crit, n_points=args.grid_points, ratio=args.grid_ratio)
        coef = np.asarray(path.chosen_entry.fit.coef) * 10.0
        if binary:
            blocks = coef.reshape(2, -1)
            for label, h in (("case", 1), ("control", 0)):
                rows.append([crit, label] + [_r(v) for v in blocks[h]])
        else:
            rows.append([crit, "effect"] + [_r(v) for v in coef])
        report["selections"].append({"criterion": crit, "lambda": path.chosen_entry.penalty.lam,
                                     "active_size": path.chosen_entry.fit.active_size,
                                     "coef_x10": coef.tolist()})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["criterion", "block"] + covs)
    w.writerows(rows)
    _write(buf.getvalue(), args.out)
    if args.json:
        report["manifest"] = man.close()
        Path(args.json).write_text(_dump(report), encoding="utf-8")
    return 0


def _r(v: float) -> str:
    return f"{v:.2f}" if abs(v) >= 0.005 else "0.00"


# ---- synthetic job-training data

LALONDE_COLUMNS = ("treat", "age", "educ", "black", "hisp", "married", "nodegr", "re74", "re75",
                   "u74", "u75", "re78")


def synthetic_lalonde(n: int = 445, seed: int = 0) -> Dict[str, np.ndarray]:
    """Structurally similar stand-in for the job-training data (same columns and rough margins)."""
    rng = np.random.default_rng(seed)
    age = np.clip(np.round(rng.gamma(9.0, 2.8, n) + 17), 17, 55)
    educ = np.clip(np.round(rng.normal(10.2, 1.8, n)), 3, 16)
    black = (rng.random(n) < 0.83).astype(float)
    hisp = ((rng.random(n) < 0.52) & (black == 0)).astype(float)
    married = (rng.random(n) < 0.17).astype(float)
    nodegr = (educ < 12).astype(float)
    u74 = (rng.random(n) < 0.73).astype(float)
    u75 = (rng.random(n) < 0.65).astype(float)
    re74 = np.where(u74 == 1, 0.0, np.round(rng.gamma(1.2, 7000.0, n), 1))
    re75 = np.where(u75 == 1, 0.0, np.round(rng.gamma(1.2, 4000.0, n), 1))
    lin = -0.6 + 0.02 * (age - 25) + 0.08 * (educ - 10) - 0.3 * nodegr + 0.2 * u75
    treat = (rng.random(n) < 1.0 / (1.0 + np.exp(-lin))).astype(float)
    mu = 2500 + 1700 * treat + 90 * (age - 25) + 300 * (educ - 10) - 800 * black + 400 * married \
        - 600 * nodegr + 0.15 * re74 + 0.25 * re75 \
        + (2 * treat - 1) * (600 * (age - 25) - 4000 * nodegr + 3000 * u75)
    earn = np.maximum(0.0, mu + rng.normal(0, 3000, n))
    zero = rng.random(n) < 0.1
    re78 = np.round(np.where(zero, 0.0, earn), 1)
    return dict(zip(LALONDE_COLUMNS, (treat, age, educ, black, hisp, married, nodegr, re74, re75,
                                      u74, u75, re78)))


def table_csv(cols: Dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(cols)
    w.writerow(names)
    for i in range(len(cols[names[0]])):
        w.writerow([f"{cols[c][i]:g}" for c in names])
    return buf.getvalue()


def cmd_make_lalonde(args) -> int:
    _write(table_csv(synthetic_lalonde(args.n, args.seed)), args.out)
    return 0


# ----------------------------------------------------------------------------
# parser


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _model_flags(p):
    p.add_argument("--data", required=True, help="CSV with columns y, t, x1..xp, z1..zq")
    p.add_argument("--pipeline", choices=PIPELINES, default="ipw-gaussian")
    p.add_argument("--family", choices=("gaussian", "binomial"), default="gaussian")
    p.add_argument("--trials", type=int, default=None, help="binomial trials m (default 1)")
    p.add_argument("--sigma2", type=float, default=None,
                   help="noise variance; plug-in estimate when omitted (ipw-gaussian)")
    p.add_argument("--groups", type=int, default=None, help="number of groups (default max t)")
    p.add_argument("--penalty", choices=("lasso", "elastic_net", "group_lasso", "scad", "mcplus"),
                   default="lasso")
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--scad-a", type=float, default=3.7)
    p.add_argument("--mcp-gamma", type=float, default=3.0)
    p.add_argument("--contrast", default=None, help="comma-separated contrast weights")
    p.add_argument("--propensity", default="fit", help="'fit' or 'known:<csv with e1..eH>'")
    p.add_argument("--out", default=None, help="output JSON path (stdout when omitted)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipwcrit", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one penalized estimator")
    _model_flags(p)
    p.add_argument("--lambda", dest="lam", required=True, help="tuning value or 'max'")
    p.add_argument("--criterion", choices=CRITERIA, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="choose lambda on a grid by a criterion")
    _model_flags(p)
    p.add_argument("--criterion", choices=CRITERIA, required=True)
    p.add_argument("--grid-points", type=int, default=50)
    p.add_argument("--grid-ratio", type=float, default=1e-3)
    p.add_argument("--table", default=None, help="also write the path table as CSV")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("--preset", choices=("table1", "table2", "table3", "table4", "table6", "table7"))
    p.add_argument("--config", default=None, help="JSON study config instead of a preset")
    p.add_argument("--settings", default=None, help="';'-separated setting indices or labels")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--grid-points", type=int, default=50)
    p.add_argument("--grid-ratio", type=float, default=1e-3)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.add_argument("--json", default=None, help="also write JSON with the run manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="criterion comparison on a job-training style CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--treatment", default="treat")
    p.add_argument("--outcome", default="re78")
    p.add_argument("--covariates", default=None, help="comma-separated; default all other columns")
    p.add_argument("--confounders", default=None, help="comma-separated; default the covariates")
    p.add_argument("--filter", action="append", default=[], help="col=val, repeatable")
    p.add_argument("--binarize", default=None, help="'nonzero' or a threshold")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--sigma2", type=float, default=None)
    p.add_argument("--grid-points", type=int, default=50)
    p.add_argument("--grid-ratio", type=float, default=1e-3)
    p.add_argument("--out", default=None, help="coefficient table CSV (stdout when omitted)")
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("make-lalonde", help="write a synthetic job-training CSV")
    p.add_argument("--n", type=int, default=445)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_make_lalonde)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, C.CriterionFailure, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
