"""Command-line front end: estimate, iv, simulate, check-expansion.

Configuration comes from a JSON file (``--config``) with per-flag overrides;
reports are JSON (sorted keys, no timestamps, so identical runs are
byte-identical) plus a flat per-replicate CSV for simulation studies.

Exit codes: 0 success, 2 configuration error, 3 data validation failure,
4 degenerate fit, 5 weak instrument.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import Optional

import numpy as np

from . import __version__
from .data import Dataset, validate
from .errors import (ConfigError, DataValidationError, FitError, MxCausalError,
                     WeakInstrumentError)
from .estimator import crossfit_estimate
from .iv import late_estimate, validate_iv
from .lab import coherent_family, derive_nuisances, double_robustness_check, \
    eif_mean_zero_check, free_family, generic_scaling_family, outcome_mean_true, \
    random_law, vonmises_identity_check
from .learners import LearnerChoice
from .nuisance import LearnerSpec
from .simgen import SimulationConfig, run_simulation
from .smoothing import BACKEND

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT, EXIT_WEAK = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration handling


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _learner_choice(obj: dict) -> LearnerChoice:
    _check_keys(obj, {"name", "basis", "ridge", "bandwidth_scale", "bandwidths",
                      "max_iter"}, "learner")
    kwargs = dict(obj)
    if "bandwidths" in kwargs and kwargs["bandwidths"] is not None:
        kwargs["bandwidths"] = tuple(float(b) for b in kwargs["bandwidths"])
    try:
        return LearnerChoice(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad learner spec: {exc}") from exc


def _learner_spec(obj: dict) -> LearnerSpec:
    choice = _learner_choice(obj)
    return LearnerSpec(obs_prob=choice, exposure_prob=choice, second_stage=choice)


def _apply_overrides(cfg: dict, args, keys: dict[str, str]) -> dict:
    out = dict(cfg)
    for flag, key in keys.items():
        val = getattr(args, flag, None)
        if val is not None:
            if key == "learner":
                out["learner"] = {**out.get("learner", {}), "name": val}
            else:
                out[key] = val
    return out


# ---------------------------------------------------------------------------
# CSV ingestion


def ingest_csv(path: str, roles: dict, levels=None) -> Dataset:
    """Strict CSV reader: empty exposure cell means unobserved.

    ``roles`` maps column names: covariates (list), exposure, outcomes (list),
    and optionally missing_flag, which must agree with exposure emptiness.
    """
    _check_keys(roles, {"covariates", "exposure", "outcomes", "missing_flag"}, "roles")
    for key in ("covariates", "exposure", "outcomes"):
        if key not in roles:
            raise ConfigError(f"roles must include {key!r}")
    cov_cols = list(roles["covariates"])
    out_cols = list(roles["outcomes"])
    z_col = roles["exposure"]
    flag_col = roles.get("missing_flag")

    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataValidationError(f"{path}: missing header row")
        needed = cov_cols + [z_col] + out_cols + ([flag_col] if flag_col else [])
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"{path}: columns not found: {missing}")

        level_set = set(str(l) for l in levels) if levels is not None else None
        xs, rs, zs, ys = [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            def cell(col):
                v = row.get(col)
                if v is None:
                    raise DataValidationError(f"{path}:{row_no}: short row")
                return v.strip()

            def number(col):
                raw = cell(col)
                try:
                    return float(raw)
                except ValueError:
                    raise DataValidationError(
                        f"{path}:{row_no}: column {col!r}: cannot parse {raw!r}") from None

            z_raw = cell(z_col)
            observed = z_raw != ""
            if flag_col is not None:
                flag_raw = cell(flag_col)
                if flag_raw not in ("0", "1"):
                    raise DataValidationError(
                        f"{path}:{row_no}: column {flag_col!r} must be 0 or 1")
                if (flag_raw == "1") != observed:
                    raise DataValidationError(
                        f"{path}:{row_no}: missing flag disagrees with exposure emptiness")
            if observed and level_set is not None and z_raw not in level_set:
                raise DataValidationError(
                    f"{path}:{row_no}: exposure {z_raw!r} not in level catalog")
            xs.append([number(c) for c in cov_cols])
            ys.append([number(c) for c in out_cols])
            rs.append(observed)
            zs.append(z_raw if observed else None)

    return Dataset.from_arrays(
        np.array(xs, float).reshape(len(xs), len(cov_cols)), rs, zs,
        np.array(ys, float).reshape(len(ys), len(out_cols)),
        levels=[str(l) for l in levels] if levels is not None else None,
        covariate_names=cov_cols, outcome_names=out_cols)


def write_csv(dataset: Dataset, path: str) -> None:
    """Companion writer (round-trips through ingest_csv with the same roles)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(dataset.covariate_names) + ["exposure"]
                        + list(dataset.outcome_names))
        for s in dataset.samples:
            writer.writerow([repr(float(v)) for v in s.covariates]
                            + [s.exposure if s.observed else ""]
                            + [repr(float(v)) for v in s.outcomes])


# ---------------------------------------------------------------------------
# report serialization


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_report(report: dict, out: Optional[str]) -> None:
    text = json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _tool_block() -> dict:
    return {"name": "mxcausal", "version": __version__, "backend": BACKEND}


def _estimate_block(report) -> dict:
    q = {"per_level": {}, "contrasts": {}}
    for lev, le in report.per_level.items():
        se = np.sqrt(np.diag(le.covariance) / report.n)
        q["per_level"][lev] = {
            "estimate": le.estimate, "se": se, "covariance": le.covariance,
            "wald_lower": le.wald_lower, "wald_upper": le.wald_upper,
            "plugin": le.plugin,
        }
    for c in report.contrasts:
        se = np.sqrt(np.diag(c.covariance) / report.n)
        q["contrasts"][c.label] = {
            "estimate": c.estimate, "se": se, "covariance": c.covariance,
            "wald_lower": c.wald_lower, "wald_upper": c.wald_upper,
        }
    q["clipping"] = report.clipping
    q["fold_plan"] = {"n": report.fold_plan.n, "folds": report.fold_plan.n_folds,
                      "seed": report.fold_plan.seed}
    return q


# ---------------------------------------------------------------------------
# subcommands


ESTIMATE_KEYS = {"input", "roles", "levels", "learner", "k", "eps", "alpha",
                 "seed", "out"}


def run_estimate(cfg: dict) -> int:
    _check_keys(cfg, ESTIMATE_KEYS, "estimate config")
    for key in ("input", "roles"):
        if key not in cfg:
            raise ConfigError(f"estimate config needs {key!r}")
    data = ingest_csv(cfg["input"], cfg["roles"], cfg.get("levels"))
    report_v = validate(data)
    if not report_v.ok:
        raise DataValidationError(
            "; ".join(f"{c.name}: {c.detail or 'failed'}" for c in report_v.failures()))
    spec = _learner_spec(cfg.get("learner", {"name": "logistic", "basis": "quadratic"}))
    est = crossfit_estimate(
        data, spec, n_folds=int(cfg.get("k", 2)), seed=int(cfg.get("seed", 0)),
        eps=float(cfg.get("eps", 0.01)), alpha=float(cfg.get("alpha", 0.05)))
    out = {
        "schema_version": SCHEMA_VERSION, "tool": _tool_block(), "command": "estimate",
        "config": {k: cfg[k] for k in sorted(set(cfg) - {"out"})},
        "n": est.n, "levels": est.levels, "outcomes": est.outcome_names,
        "results": _estimate_block(est),
    }
    _write_report(out, cfg.get("out"))
    return EXIT_OK


IV_KEYS = ESTIMATE_KEYS | {"delta"}


def run_iv(cfg: dict) -> int:
    _check_keys(cfg, IV_KEYS, "iv config")
    for key in ("input", "roles"):
        if key not in cfg:
            raise ConfigError(f"iv config needs {key!r}")
    data = ingest_csv(cfg["input"], cfg["roles"], cfg.get("levels"))
    validate_iv(data)
    spec = _learner_spec(cfg.get("learner", {"name": "logistic", "basis": "quadratic"}))
    late = late_estimate(
        data, spec, n_folds=int(cfg.get("k", 2)), seed=int(cfg.get("seed", 0)),
        eps=float(cfg.get("eps", 0.01)), alpha=float(cfg.get("alpha", 0.05)),
        delta=float(cfg.get("delta", 0.01)))
    out = {
        "schema_version": SCHEMA_VERSION, "tool": _tool_block(), "command": "iv",
        "config": {k: cfg[k] for k in sorted(set(cfg) - {"out"})},
        "n": late.n,
        "late": {
            "theta": late.theta, "se": late.se,
            "wald_lower": late.wald_lower, "wald_upper": late.wald_upper,
            "numerator": late.numerator, "denominator": late.denominator,
            "weak_instrument": late.weak_instrument,
        },
    }
    _write_report(out, cfg.get("out"))
    return EXIT_OK


SIMULATE_KEYS = {"dgp", "n_grid", "reps", "seed", "learner", "targets", "estimators",
                 "k", "eps", "alpha", "delta", "out", "csv"}


def run_simulate(cfg: dict, workers: int = 1) -> int:
    _check_keys(cfg, SIMULATE_KEYS, "simulate config")
    dgp = dict(cfg.get("dgp", {}))
    _check_keys(dgp, {"family", "d", "knob"}, "dgp")
    if "family" not in dgp:
        raise ConfigError("simulate config needs dgp.family")
    learner = dict(cfg.get("learner", {"name": "logistic", "basis": "quadratic"}))
    use_oracle = learner.get("name") == "oracle"
    if not use_oracle:
        _learner_choice(learner)  # validate eagerly

    sim_cfg = SimulationConfig(
        family=dgp["family"], d=int(dgp.get("d", 1)), knob=dgp.get("knob", "none"),
        n_grid=tuple(int(n) for n in cfg.get("n_grid", [1000])),
        reps=int(cfg.get("reps", 100)), seed=int(cfg.get("seed", 0)),
        learner=learner.get("name", "logistic"),
        basis=learner.get("basis", "quadratic"),
        bandwidth_scale=float(learner.get("bandwidth_scale", 1.0)),
        use_oracle=use_oracle,
        n_folds=int(cfg.get("k", 2)), eps=float(cfg.get("eps", 0.01)),
        alpha=float(cfg.get("alpha", 0.05)), delta=float(cfg.get("delta", 0.01)),
        targets=tuple(cfg.get("targets", ["ate:1-0"])),
        estimators=tuple(cfg.get("estimators", ["onestep"])),
    )
    result = run_simulation(sim_cfg, workers=workers)

    if cfg.get("csv"):
        with open(cfg["csv"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "replicate", "estimator", "target", "estimate",
                             "se", "truth", "covered"])
            for r in result.records:
                writer.writerow([
                    r.n, r.replicate, r.estimator, r.target, repr(r.estimate),
                    "" if r.se is None else repr(r.se), repr(r.truth),
                    "" if r.covered is None else int(r.covered),
                ])

    out = {
        "schema_version": SCHEMA_VERSION, "tool": _tool_block(), "command": "simulate",
        "config": {k: cfg[k] for k in sorted(set(cfg) - {"out", "csv"})},
        "summaries": [
            {"n": s.n, "estimator": s.estimator, "target": s.target, "reps": s.reps,
             "bias": s.bias, "rmse": s.rmse, "coverage": s.coverage,
             "mean_se": s.mean_se, "truth": s.truth}
            for s in result.summaries
        ],
    }
    _write_report(out, cfg.get("out"))
    return EXIT_OK


CHECK_KEYS = {"laws", "seed", "out"}


def run_check(cfg: dict) -> int:
    """Identity battery on randomized laws: identification cross-check,
    mean-zero residuals, the expansion identity, remainder scaling, and the
    two zero-remainder patterns."""
    _check_keys(cfg, CHECK_KEYS, "check config")
    n_laws = int(cfg.get("laws", 50))
    seed = int(cfg.get("seed", 20260101))

    ident, meanzero, vonmises, scaling = [], [], [], []
    dr_zero, dr_nonzero = [], []
    for i in range(n_laws):
        law = random_law(seed + i, nx=3, k=2, ny=3)
        tab = derive_nuisances(law)
        ratio = tab.weighted / tab.propensity[:, :, None]
        psi = np.einsum("x,xkp->kp", law.x_probs, ratio)
        direct = np.einsum("x,xkp->kp", law.x_probs, outcome_mean_true(law))
        ident.append(float(np.abs(psi - direct).max()))
        meanzero.append(eif_mean_zero_check(law))

        fam = coherent_family(law, seed=seed + 7_000 + i, t_max=0.4)
        res = vonmises_identity_check(fam.at(0.1))
        vonmises.append(max(res.residual, res.remainder_gap))

        gentle = generic_scaling_family(law, seed=seed + 11_000 + i)
        r = [float(np.abs(vonmises_identity_check(gentle.at(t)).remainder).max())
             for t in (0.02, 0.04, 0.08)]
        scaling.extend([r[1] / r[0], r[2] / r[1]])

        keep_pi = free_family(law, seed + 13_000 + i, which=frozenset({"exposure", "weighted"}))
        keep_lam = free_family(law, seed + 17_000 + i, which=frozenset({"obs", "weighted"}))
        broken = free_family(law, seed + 19_000 + i, which=frozenset({"obs", "exposure"}))
        dr_zero.append(float(np.abs(double_robustness_check(keep_pi.at(0.1))).max()))
        dr_zero.append(float(np.abs(double_robustness_check(keep_lam.at(0.1))).max()))
        dr_nonzero.append(float(np.abs(double_robustness_check(broken.at(0.1))).max()))

    checks = {
        "identification_max_residual": {"value": max(ident), "bound": 1e-10,
                                        "passed": max(ident) < 1e-10},
        "mean_zero_max_residual": {"value": max(meanzero), "bound": 1e-10,
                                   "passed": max(meanzero) < 1e-10},
        "vonmises_max_residual": {"value": max(vonmises), "bound": 1e-10,
                                  "passed": max(vonmises) < 1e-10},
        "remainder_scaling_ratios": {"min": min(scaling), "max": max(scaling),
                                     "bound": [3.5, 4.5],
                                     "passed": 3.5 <= min(scaling) and max(scaling) <= 4.5},
        "double_robustness_zero": {"value": max(dr_zero), "bound": 1e-12,
                                   "passed": max(dr_zero) < 1e-12},
        "double_robustness_nonzero": {"value": min(dr_nonzero), "bound": 1e-6,
                                      "passed": min(dr_nonzero) > 1e-6},
    }
    all_ok = all(c["passed"] for c in checks.values())
    out = {
        "schema_version": SCHEMA_VERSION, "tool": _tool_block(),
        "command": "check-expansion",
        "config": {"laws": n_laws, "seed": seed},
        "checks": checks, "all_passed": all_ok,
    }
    _write_report(out, cfg.get("out"))
    return EXIT_OK if all_ok else 1


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mxcausal",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, reps=False, delta=False):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--k", type=int, help="number of cross-fitting folds")
        p.add_argument("--eps", type=float, help="probability clipping constant")
        p.add_argument("--alpha", type=float, help="interval level")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="report output path")
        p.add_argument("--learner", help="learner name override")
        if reps:
            p.add_argument("--reps", type=int, help="replicates per cell")
        if delta:
            p.add_argument("--delta", type=float, help="first-stage guard")

    common(sub.add_parser("estimate", help="counterfactual means from a CSV"))
    common(sub.add_parser("iv", help="complier effect with a missing instrument"),
           delta=True)
    sim = sub.add_parser("simulate", help="replicate study on a synthetic DGP")
    common(sim, reps=True)
    sim.add_argument("--workers", type=int, default=1,
                     help="parallel replicate workers (does not affect results)")
    chk = sub.add_parser("check-expansion", help="verify expansion identities by enumeration")
    chk.add_argument("--config", help="JSON configuration file")
    chk.add_argument("--laws", type=int, help="number of randomized laws")
    chk.add_argument("--seed", type=int, help="base seed")
    chk.add_argument("--out", help="report output path")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.command == "estimate":
            cfg = _apply_overrides(cfg, args, {"k": "k", "eps": "eps", "alpha": "alpha",
                                               "seed": "seed", "out": "out",
                                               "learner": "learner"})
            return run_estimate(cfg)
        if args.command == "iv":
            cfg = _apply_overrides(cfg, args, {"k": "k", "eps": "eps", "alpha": "alpha",
                                               "seed": "seed", "out": "out",
                                               "learner": "learner", "delta": "delta"})
            return run_iv(cfg)
        if args.command == "simulate":
            cfg = _apply_overrides(cfg, args, {"k": "k", "eps": "eps", "alpha": "alpha",
                                               "seed": "seed", "out": "out",
                                               "learner": "learner", "reps": "reps"})
            return run_simulate(cfg, workers=args.workers)
        cfg = _apply_overrides(cfg, args, {"laws": "laws", "seed": "seed", "out": "out"})
        return run_check(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataValidationError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except WeakInstrumentError as exc:
        print(f"weak instrument: {exc}", file=sys.stderr)
        return EXIT_WEAK
    except FitError as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        return EXIT_FIT
    except MxCausalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
