"""Synthetic data-generating processes with known ground truth.

Families:

* ``discrete_reference`` -- binary covariate / exposure / outcome skeleton
  with linear-probability structural equations; fully enumerable.
* ``dag_a`` / ``dag_b``   -- same skeleton with uniform continuous covariates;
  in ``dag_a`` the observation flag depends on covariates only (missingness
  before the outcome), in ``dag_b`` on covariates and outcome (after).
* ``iv_reference``        -- binary instrument with a monotone first stage
  built from a shared uniform; bivariate outcome (treatment, outcome).
* ``iv_null``             -- instrument with no first stage (guard testing).

Misspecification knobs map to degraded nuisance fits; ``rate_injection``
wraps exact nuisance tables with deterministic errors shrinking like a
configurable power of n for rate studies.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .estimator import crossfit_estimate
from .lab import (DiscreteLaw, NuisanceTables, atoms, derive_nuisances, free_family,
                  influence_atom_values, oracle_nuisances, psi_true, remainder_closed_form,
                  sample_from)
from .learners import LearnerChoice
from .nuisance import LearnerSpec, OracleNuisances

FAMILIES = ("discrete_reference", "dag_a", "dag_b", "iv_reference", "iv_null")
KNOBS = ("none", "bias_pi", "bias_lambda", "bias_gamma")

# linear-probability coefficient bundles shared by all families
PROPENSITY_BASE, PROPENSITY_SLOPE = 0.3, 0.4          # P(Z=1 | X)
OUTCOME_BASE, OUTCOME_Z, OUTCOME_X = 0.2, 0.3, 0.2    # P(Y=1 | X, Z)
OBS_BASE, OBS_X, OBS_Y = 0.5, 0.2, 0.2                # P(R=1 | X, Y), dag_b
OBS_A_BASE, OBS_A_X = 0.5, 0.3                        # P(R=1 | X), dag_a
IV_Z_BASE, IV_Z_X = 0.4, 0.2                          # P(Z=1 | X)
IV_A_BASE, IV_A_Z, IV_A_X = 0.2, 0.4, 0.1             # P(A=1 | X, Z)
IV_EFFECT, IV_X_SLOPE, IV_NOISE = 0.5, 0.2, 0.1       # Y = effect*A + slope*X +- noise
IV_OBS_BASE, IV_OBS_X, IV_OBS_A = 0.5, 0.2, 0.2       # P(R=1 | X, A)


@dataclass(frozen=True)
class DGPSpec:
    family: str
    n: int
    seed: int
    d: int = 1
    knob: str = "none"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.knob not in KNOBS:
            raise ConfigError(f"unknown knob {self.knob!r}")
        if self.family.startswith("iv") and self.d != 1:
            raise ConfigError("instrument families use a single binary covariate")


@dataclass(frozen=True)
class GroundTruth:
    psi: np.ndarray                    # (k, p)
    levels: tuple[str, ...]
    theta: Optional[float] = None      # instrument families only
    provenance: str = "closed_form"

    def ate(self, minuend: str = "1", subtrahend: str = "0") -> np.ndarray:
        i, j = self.levels.index(minuend), self.levels.index(subtrahend)
        return self.psi[i] - self.psi[j]


@dataclass(frozen=True)
class SimData:
    dataset: Dataset
    truth: GroundTruth
    law: Optional[DiscreteLaw]
    oracle: Optional[OracleNuisances]


def knob_degrade(knob: str) -> frozenset[str]:
    return {
        "none": frozenset(),
        "bias_pi": frozenset({"obs_prob"}),
        "bias_lambda": frozenset({"exposure_prob"}),
        "bias_gamma": frozenset({"propensity"}),
    }[knob]


def reference_law() -> DiscreteLaw:
    """The enumerable binary skeleton; counterfactual means 0.6 and 0.3."""
    xs = np.array([[0.0], [1.0]])
    ys = np.array([[0.0], [1.0]])
    z_probs = np.empty((2, 2))
    y_probs = np.empty((2, 2, 2))
    obs = np.empty((2, 2))
    for xi, x in enumerate((0.0, 1.0)):
        g1 = PROPENSITY_BASE + PROPENSITY_SLOPE * x
        z_probs[xi] = [1.0 - g1, g1]
        for zi in (0, 1):
            p1 = OUTCOME_BASE + OUTCOME_Z * zi + OUTCOME_X * x
            y_probs[xi, zi] = [1.0 - p1, p1]
        for yi, y in enumerate((0.0, 1.0)):
            obs[xi, yi] = OBS_BASE + OBS_X * x + OBS_Y * y
    return DiscreteLaw(xs, ("0", "1"), ys, np.array([0.5, 0.5]), z_probs, y_probs, obs)


def iv_first_stage(x: float, z: int) -> float:
    """P(treatment = 1 | covariate, instrument); monotone in the instrument."""
    return IV_A_BASE + IV_A_Z * z + IV_A_X * x


def iv_potential_treatment_table(x: float) -> dict[tuple[int, int], float]:
    """Joint law of (A under z=0, A under z=1) from the shared-uniform construction."""
    p0, p1 = iv_first_stage(x, 0), iv_first_stage(x, 1)
    return {(1, 1): p0, (0, 1): p1 - p0, (0, 0): 1.0 - p1}


def iv_law(null_first_stage: bool = False) -> DiscreteLaw:
    """Binary-instrument law with bivariate outcome (treatment, outcome).

    Outcome atoms are (a, y) pairs with y = effect*a + slope*x +- noise; the
    local effect among compliers is 0.5 by construction.
    """
    xs = np.array([[0.0], [1.0]])
    noise = (-IV_NOISE, IV_NOISE)
    y_atoms = sorted({(a, round(IV_EFFECT * a + IV_X_SLOPE * x + e, 10))
                      for a in (0, 1) for x in (0.0, 1.0) for e in noise})
    ys = np.array([[float(a), y] for a, y in y_atoms])
    ny = len(y_atoms)
    atom_index = {atom: i for i, atom in enumerate(y_atoms)}

    z_probs = np.empty((2, 2))
    y_probs = np.zeros((2, 2, ny))
    obs = np.empty((2, ny))
    for xi, x in enumerate((0.0, 1.0)):
        pz = IV_Z_BASE + IV_Z_X * x
        z_probs[xi] = [1.0 - pz, pz]
        for zi in (0, 1):
            pa = iv_first_stage(x, 0 if null_first_stage else zi)
            for a, prob_a in ((0, 1.0 - pa), (1, pa)):
                for e in noise:
                    atom = (a, round(IV_EFFECT * a + IV_X_SLOPE * x + e, 10))
                    y_probs[xi, zi, atom_index[atom]] += prob_a * 0.5
        for (a, _y), i in atom_index.items():
            obs[xi, i] = IV_OBS_BASE + IV_OBS_X * x + IV_OBS_A * a
    return DiscreteLaw(xs, ("0", "1"), ys, np.array([0.5, 0.5]), z_probs, y_probs, obs)


def _dag_oracle(family: str) -> OracleNuisances:
    """Closed-form nuisances for the continuous-covariate families."""

    def index(x):
        return np.atleast_2d(np.asarray(x, float)).mean(axis=1)

    def prop(x):
        g1 = PROPENSITY_BASE + PROPENSITY_SLOPE * index(x)
        return np.column_stack([1.0 - g1, g1])

    def outcome_p1(x, z):
        return OUTCOME_BASE + OUTCOME_Z * z + OUTCOME_X * index(x)

    def obs_prob(x, y):
        if family == "dag_a":
            return OBS_A_BASE + OBS_A_X * index(x)
        return OBS_BASE + OBS_X * index(x) + OBS_Y * np.atleast_2d(y)[:, 0]

    def exposure_prob(x, y):
        g = prop(x)
        yv = np.atleast_2d(y)[:, 0]
        like = np.column_stack([
            np.where(yv > 0.5, outcome_p1(x, z), 1.0 - outcome_p1(x, z))
            for z in (0, 1)
        ])
        joint = g * like
        return joint / joint.sum(axis=1, keepdims=True)

    def weighted_outcome(x):
        g = prop(x)
        w = np.stack([g[:, z] * outcome_p1(x, z) for z in (0, 1)], axis=1)
        return w[:, :, None]

    return OracleNuisances(obs_prob, exposure_prob, prop, weighted_outcome)


def generate(spec: DGPSpec) -> SimData:
    """Reproducible dataset plus ground truth (and law / oracle where available)."""
    if spec.family in ("discrete_reference", "iv_reference", "iv_null"):
        law = reference_law() if spec.family == "discrete_reference" else \
            iv_law(null_first_stage=spec.family == "iv_null")
        dataset = sample_from(law, spec.n, spec.seed)
        psi = psi_true(law)
        theta = None
        if spec.family == "iv_reference":
            from .iv import late_identify
            theta = late_identify(law)
        truth = GroundTruth(psi, law.z_levels, theta, provenance="enumeration")
        return SimData(dataset, truth, law, oracle_nuisances(law))

    rng = np.random.default_rng(spec.seed)
    n, d = spec.n, spec.d
    x = rng.uniform(0.0, 1.0, size=(n, d))
    idx = x.mean(axis=1)
    z = (rng.random(n) < PROPENSITY_BASE + PROPENSITY_SLOPE * idx).astype(int)
    y = (rng.random(n) < OUTCOME_BASE + OUTCOME_Z * z + OUTCOME_X * idx).astype(float)
    if spec.family == "dag_a":
        p_obs = OBS_A_BASE + OBS_A_X * idx
    else:
        p_obs = OBS_BASE + OBS_X * idx + OBS_Y * y
    observed = rng.random(n) < p_obs
    exposure = [str(z[i]) if observed[i] else None for i in range(n)]
    dataset = Dataset.from_arrays(x, observed, exposure, y[:, None], levels=("0", "1"))
    # mean covariate index is 1/2, so the counterfactual means are exact
    psi = np.array([[OUTCOME_BASE + OUTCOME_X * 0.5],
                    [OUTCOME_BASE + OUTCOME_Z + OUTCOME_X * 0.5]])
    truth = GroundTruth(psi, ("0", "1"), provenance="closed_form")
    return SimData(dataset, truth, None, _dag_oracle(spec.family))


# ---------------------------------------------------------------------------
# deterministic nuisance-error injection and rate studies


@dataclass(frozen=True)
class RateInjection:
    """Exact nuisance tables plus a deterministic error of size amplitude * n^-exponent.

    ``spread`` widens the validity range of the perturbation direction, keeping
    the injected error well inside the quadratic regime at the smallest n.
    """

    law: DiscreteLaw
    exponent: float
    amplitude: float
    seed: int
    n_min: int
    spread: float = 3.0
    which: frozenset[str] = frozenset({"obs", "exposure", "propensity", "weighted"})
    _family: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        fam = free_family(self.law, self.seed, which=self.which,
                          t_max=self.spread * self.delta(self.n_min))
        object.__setattr__(self, "_family", fam)

    def delta(self, n: int) -> float:
        if math.isinf(self.exponent):
            return 0.0
        return self.amplitude * float(n) ** (-self.exponent)

    def tables(self, n: int) -> NuisanceTables:
        d = self.delta(n)
        if d == 0.0:
            return derive_nuisances(self.law)
        return self._family.at(d).tables

    def oracle(self, n: int) -> OracleNuisances:
        return oracle_nuisances(self.law, self.tables(n))


@dataclass(frozen=True)
class RateStudyResult:
    n_grid: tuple[int, ...]
    abs_bias: tuple[float, ...]        # |mean estimate - truth| per n
    rmse: tuple[float, ...]
    exact_remainder: tuple[float, ...]  # enumerated expansion remainder per n
    slope: float                        # log-log fit of |bias| on n

    def rmse_ratio(self, i: int) -> float:
        return self.rmse[i] / self.rmse[i + 1]


def rate_study(law: DiscreteLaw, injection: RateInjection, n_grid, reps: int,
               seed: int, level_index: int = 1, coord: int = 0) -> RateStudyResult:
    """Monte Carlo bias/RMSE of the one-step average under injected nuisance errors.

    The estimator is the sample mean of the (deterministically perturbed)
    influence values; replicates draw atom counts, which matches iid record
    draws exactly.
    """
    at = atoms(law)
    truth = float(psi_true(law)[level_index, coord])
    biases, rmses, remainders = [], [], []
    rng = np.random.default_rng(seed)
    for n in n_grid:
        tab = injection.tables(n)
        vals = influence_atom_values(law, tab, at)[:, level_index, coord]
        estimates = np.empty(reps)
        for rep in range(reps):
            counts = rng.multinomial(n, at.prob)
            estimates[rep] = counts @ vals / n
        biases.append(abs(float(estimates.mean()) - truth))
        rmses.append(float(np.sqrt(np.mean((estimates - truth) ** 2))))
        remainders.append(float(remainder_closed_form(law, tab)[level_index, coord]))
    logn = np.log(np.asarray(n_grid, float))
    logb = np.log(np.maximum(biases, 1e-300))
    slope = float(np.polyfit(logn, logb, 1)[0])
    return RateStudyResult(tuple(int(n) for n in n_grid), tuple(biases), tuple(rmses),
                           tuple(remainders), slope)


@dataclass(frozen=True)
class PluginComparisonResult:
    onestep_abs_bias: float
    plugin_abs_bias: float
    onestep_win_fraction: float        # fraction of batches where one-step is closer


def plugin_vs_onestep_study(law: DiscreteLaw, injection: RateInjection, n: int,
                            n_batches: int, batch_size: int, seed: int,
                            level_index: int = 1, coord: int = 0) -> PluginComparisonResult:
    """Paired batches of the bias-corrected average versus the raw plug-in."""
    at = atoms(law)
    truth = float(psi_true(law)[level_index, coord])
    tab = injection.tables(n)
    vals_one = influence_atom_values(law, tab, at)[:, level_index, coord]
    ratio = tab.weighted[:, level_index, coord] / tab.propensity[:, level_index]
    vals_plug = ratio[at.x_idx]

    rng = np.random.default_rng(seed)
    wins = 0
    one_all, plug_all = [], []
    for _ in range(n_batches):
        one = np.empty(batch_size)
        plug = np.empty(batch_size)
        for b in range(batch_size):
            counts = rng.multinomial(n, at.prob)
            one[b] = counts @ vals_one / n
            plug[b] = counts @ vals_plug / n
        if abs(one.mean() - truth) < abs(plug.mean() - truth):
            wins += 1
        one_all.append(one.mean())
        plug_all.append(plug.mean())
    return PluginComparisonResult(
        abs(float(np.mean(one_all)) - truth),
        abs(float(np.mean(plug_all)) - truth),
        wins / n_batches,
    )


# ---------------------------------------------------------------------------
# replicate engine (full estimation pipeline, embarrassingly parallel)


@dataclass(frozen=True)
class SimulationConfig:
    """One simulation study: DGP, learner, estimator settings and targets."""

    family: str
    n_grid: tuple[int, ...]
    reps: int
    seed: int
    d: int = 1
    knob: str = "none"
    learner: str = "logistic"
    basis: str = "quadratic"
    bandwidth_scale: float = 1.0
    use_oracle: bool = False
    n_folds: int = 2
    eps: float = 0.01
    alpha: float = 0.05
    delta: float = 0.01
    targets: tuple[str, ...] = ("ate:1-0",)
    estimators: tuple[str, ...] = ("onestep",)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        for t in self.targets:
            _parse_target(t)
        for e in self.estimators:
            if e not in ("onestep", "plugin"):
                raise ConfigError(f"unknown estimator {e!r}")


@dataclass(frozen=True)
class ReplicateRecord:
    n: int
    replicate: int
    estimator: str
    target: str
    estimate: float
    se: Optional[float]
    truth: float
    covered: Optional[bool]


def _parse_target(target: str):
    if target == "late":
        return ("late",)
    kind, _, rest = target.partition(":")
    if kind == "psi" and rest:
        return ("psi", rest)
    if kind == "ate" and "-" in rest:
        hi, lo = rest.split("-", 1)
        return ("ate", hi, lo)
    raise ConfigError(f"unknown target {target!r} (use 'psi:<level>', 'ate:<a>-<b>', 'late')")


def replicate_seed(master_seed: int, n: int, replicate: int) -> int:
    """Splittable per-replicate seed from (master seed, cell)."""
    return int(np.random.SeedSequence((master_seed, n, replicate)).generate_state(1)[0])


def _learner_spec(cfg: SimulationConfig, sim: SimData) -> LearnerSpec:
    if cfg.use_oracle:
        if sim.oracle is None:
            raise ConfigError(f"family {cfg.family!r} has no oracle nuisances")
        return LearnerSpec(oracle=sim.oracle, degrade=knob_degrade(cfg.knob))
    choice = LearnerChoice(name=cfg.learner, basis=cfg.basis,
                           bandwidth_scale=cfg.bandwidth_scale)
    return LearnerSpec(obs_prob=choice, exposure_prob=choice, second_stage=choice,
                       degrade=knob_degrade(cfg.knob))


def run_one_replicate(cfg: SimulationConfig, n: int, replicate: int) -> list[ReplicateRecord]:
    seed = replicate_seed(cfg.seed, n, replicate)
    sim = generate(DGPSpec(family=cfg.family, n=n, seed=seed, d=cfg.d, knob=cfg.knob))
    spec = _learner_spec(cfg, sim)
    records: list[ReplicateRecord] = []

    if "late" in cfg.targets:
        from .iv import late_estimate
        rep = late_estimate(sim.dataset, spec, n_folds=cfg.n_folds, seed=seed,
                            eps=cfg.eps, alpha=cfg.alpha, delta=cfg.delta)
        truth = float(sim.truth.theta)
        records.append(ReplicateRecord(
            n, replicate, "onestep", "late", rep.theta, rep.se, truth,
            rep.wald_lower <= truth <= rep.wald_upper))

    plain = [t for t in cfg.targets if t != "late"]
    if plain:
        report = crossfit_estimate(sim.dataset, spec, n_folds=cfg.n_folds,
                                   seed=seed, eps=cfg.eps, alpha=cfg.alpha)
        for target in plain:
            parsed = _parse_target(target)
            for estimator in cfg.estimators:
                if parsed[0] == "psi":
                    le = report.per_level[parsed[1]]
                    truth = float(sim.truth.psi[sim.truth.levels.index(parsed[1]), 0])
                    if estimator == "onestep":
                        est, lo, hi = le.estimate[0], le.wald_lower[0], le.wald_upper[0]
                        se = (hi - est) / _quantile(cfg.alpha)
                        records.append(ReplicateRecord(n, replicate, estimator, target,
                                                       float(est), float(se), truth,
                                                       bool(lo <= truth <= hi)))
                    else:
                        records.append(ReplicateRecord(n, replicate, estimator, target,
                                                       float(le.plugin[0]), None, truth, None))
                else:
                    ce = report.contrast(parsed[1], parsed[2])
                    truth = float(sim.truth.ate(parsed[1], parsed[2])[0])
                    if estimator == "onestep":
                        est, lo, hi = ce.estimate[0], ce.wald_lower[0], ce.wald_upper[0]
                        se = (hi - est) / _quantile(cfg.alpha)
                        records.append(ReplicateRecord(n, replicate, estimator, target,
                                                       float(est), float(se), truth,
                                                       bool(lo <= truth <= hi)))
                    else:
                        plug = (report.per_level[parsed[1]].plugin[0]
                                - report.per_level[parsed[2]].plugin[0])
                        records.append(ReplicateRecord(n, replicate, estimator, target,
                                                       float(plug), None, truth, None))
    return records


def _quantile(alpha: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(1.0 - alpha / 2.0))


def _worker(args) -> list[ReplicateRecord]:
    cfg, n, replicate = args
    return run_one_replicate(cfg, n, replicate)


@dataclass(frozen=True)
class CellSummary:
    n: int
    estimator: str
    target: str
    reps: int
    bias: float
    rmse: float
    coverage: Optional[float]
    mean_se: Optional[float]
    truth: float


@dataclass(frozen=True)
class SimulationResult:
    config: SimulationConfig
    records: tuple[ReplicateRecord, ...]
    summaries: tuple[CellSummary, ...]


def run_simulation(cfg: SimulationConfig, workers: int = 1) -> SimulationResult:
    """Run all replicates; results are reduced in cell order and do not depend
    on the worker count."""
    cells = [(cfg, n, rep) for n in cfg.n_grid for rep in range(cfg.reps)]
    if workers <= 1:
        per_cell = [_worker(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_cell = list(pool.map(_worker, cells, chunksize=max(1, len(cells) // (8 * workers))))
    records = tuple(rec for cell in per_cell for rec in cell)

    summaries = []
    for n in cfg.n_grid:
        for target in cfg.targets:
            for estimator in (cfg.estimators if target != "late" else ("onestep",)):
                rs = [r for r in records
                      if r.n == n and r.target == target and r.estimator == estimator]
                if not rs:
                    continue
                est = np.array([r.estimate for r in rs])
                truth = rs[0].truth
                covered = [r.covered for r in rs if r.covered is not None]
                ses = [r.se for r in rs if r.se is not None]
                summaries.append(CellSummary(
                    n=n, estimator=estimator, target=target, reps=len(rs),
                    bias=float(est.mean() - truth),
                    rmse=float(np.sqrt(np.mean((est - truth) ** 2))),
                    coverage=float(np.mean(covered)) if covered else None,
                    mean_se=float(np.mean(ses)) if ses else None,
                    truth=float(truth),
                ))
    return SimulationResult(cfg, records, tuple(summaries))
