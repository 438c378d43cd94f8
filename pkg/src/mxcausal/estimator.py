"""Cross-fitted one-step estimation of counterfactual outcome means.

The per-record influence value for level z is

    {(Y - w/g) / g} * [ R (1{Z=z} - lam) / q + lam ] + w/g

with q = obs_prob(X, Y), lam = exposure_prob_z(X, Y), g = propensity_z(X),
w = weighted_outcome_z(X). Averaging these values over the sample, with
nuisances fit on the complementary fold, gives the bias-corrected estimate;
averaging only w/g gives the uncorrected plug-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import Dataset, require_valid
from .errors import DegenerateFoldError, FitError, MxCausalError
from .nuisance import LearnerSpec, NuisanceModel, fit_all, _subset


def uncentered_influence(y, r, z_ind, lam, p_obs, prop, wout):
    """Influence values for one treatment level, vectorized over records.

    Parameters are aligned arrays: outcomes (m, p), observed flag (m,),
    level indicator (m,), and the four nuisance evaluations.
    """
    y = np.atleast_2d(np.asarray(y, float))
    m_hat = np.asarray(wout, float) / np.asarray(prop, float)[:, None]
    resid = (y - m_hat) / np.asarray(prop, float)[:, None]
    bracket = np.asarray(r, float) * (np.asarray(z_ind, float) - lam) / p_obs + lam
    out = resid * bracket[:, None] + m_hat
    if not np.isfinite(out).all():
        raise MxCausalError("non-finite influence value; check clipping bounds")
    return out


@dataclass(frozen=True)
class FoldPlan:
    """Deterministic balanced partition of record indices into folds."""

    n: int
    n_folds: int
    seed: int
    assignment: np.ndarray = field(repr=False)

    def fold_indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def train_indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != j)


def make_folds(n: int, n_folds: int, seed: int) -> FoldPlan:
    """Balanced seeded partition; fold sizes differ by at most one."""
    if n_folds < 2:
        raise MxCausalError(f"need at least 2 folds, got {n_folds}")
    if n < 2 * n_folds:
        raise MxCausalError(f"n={n} too small for {n_folds} folds (need n >= {2 * n_folds})")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % n_folds
    assignment.setflags(write=False)
    return FoldPlan(n, n_folds, seed, assignment)


@dataclass(frozen=True)
class LevelEstimate:
    level: str
    estimate: np.ndarray          # (p,)
    covariance: np.ndarray        # (p, p), influence-value sample covariance
    wald_lower: np.ndarray
    wald_upper: np.ndarray
    plugin: np.ndarray            # (p,), uncorrected plug-in


@dataclass(frozen=True)
class ContrastEstimate:
    minuend: str
    subtrahend: str
    estimate: np.ndarray
    covariance: np.ndarray
    wald_lower: np.ndarray
    wald_upper: np.ndarray

    @property
    def label(self) -> str:
        return f"{self.minuend}-{self.subtrahend}"


@dataclass(frozen=True)
class EstimateReport:
    levels: tuple[str, ...]
    outcome_names: tuple[str, ...]
    n: int
    n_folds: int
    seed: int
    eps: float
    alpha: float
    per_level: dict[str, LevelEstimate]
    contrasts: tuple[ContrastEstimate, ...]
    clipping: dict[str, int]
    fold_plan: FoldPlan
    no_split_unsafe: bool
    influence: np.ndarray = field(repr=False)     # (k, n, p)
    plugin_rows: np.ndarray = field(repr=False)   # (k, n, p)

    def contrast(self, minuend: str, subtrahend: str) -> ContrastEstimate:
        for c in self.contrasts:
            if c.minuend == minuend and c.subtrahend == subtrahend:
                return c
        raise KeyError(f"no contrast {minuend}-{subtrahend}")


def _column_means(rows: np.ndarray) -> np.ndarray:
    # exact accumulation: the mean is invariant to record order
    return np.array([math.fsum(col) / rows.shape[0] for col in rows.T])


def _sample_cov(rows: np.ndarray) -> np.ndarray:
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / (rows.shape[0] - 1)
    return (cov + cov.T) / 2.0


def evaluate_influence(nm: NuisanceModel, data: Dataset, idx: np.ndarray):
    """Influence and plug-in values for records ``idx`` under a fitted model.

    Returns (phi (k, m, p), plugin (k, m, p), clip-count dict).
    """
    x, y = data.x[idx], data.y[idx]
    r = data.r[idx].astype(float)
    z = data.z_idx[idx]
    lam, n_floor = nm.exposure_prob(x, y)
    p_obs, n_clip_obs = nm.obs_prob(x, y)
    prop, n_clip_prop = nm.propensity(x)
    wout = nm.weighted_outcome(x)

    k, p = data.k, data.p
    phi = np.empty((k, idx.size, p))
    plug = np.empty((k, idx.size, p))
    for a in range(k):
        z_ind = (z == a).astype(float)
        phi[a] = uncentered_influence(y, r, z_ind, lam[:, a], p_obs, prop[:, a], wout[:, a, :])
        plug[a] = wout[:, a, :] / prop[:, a][:, None]
    clips = {"obs_prob": n_clip_obs, "propensity": n_clip_prop, "exposure_prob": n_floor}
    return phi, plug, clips


def eif_evaluate(sample, nm: NuisanceModel, level: str, levels) -> np.ndarray:
    """Influence value of a single record at one treatment level (p-vector)."""
    levels = tuple(str(l) for l in levels)
    a = levels.index(str(level))
    x = sample.covariates[None, :]
    y = sample.outcomes[None, :]
    r = np.array([float(sample.observed)])
    z_ind = np.array([1.0 if sample.exposure == levels[a] else 0.0])
    lam, _ = nm.exposure_prob(x, y)
    p_obs, _ = nm.obs_prob(x, y)
    prop, _ = nm.propensity(x)
    wout = nm.weighted_outcome(x)
    return uncentered_influence(y, r, z_ind, lam[:, a], p_obs, prop[:, a], wout[:, a, :])[0]


def crossfit_estimate(data: Dataset, spec: LearnerSpec, n_folds: int = 2,
                      seed: int = 0, eps: float = 0.01, alpha: float = 0.05,
                      no_split_unsafe: bool = False) -> EstimateReport:
    """Fit-on-complement / evaluate-on-fold estimation with full swap.

    All n influence evaluations are pooled for the point estimate, the
    covariance (divisor n-1) and coordinatewise Wald intervals at level
    ``alpha``. The uncorrected plug-in from the same nuisance fits is
    reported alongside.
    """
    require_valid(data)
    n, k, p = data.n, data.k, data.p
    phi = np.empty((k, n, p))
    plug = np.empty((k, n, p))
    clips = {"obs_prob": 0, "propensity": 0, "exposure_prob": 0}

    if no_split_unsafe:
        plan = FoldPlan(n, 1, seed, np.zeros(n, dtype=np.int64))
        nm = fit_all(data, spec, eps, provenance="no-split (unsafe)")
        idx = np.arange(n)
        phi[:, idx], plug[:, idx], c = evaluate_influence(nm, data, idx)
        for key in clips:
            clips[key] += c[key]
    else:
        plan = make_folds(n, n_folds, seed)
        for j in range(n_folds):
            train = _subset(data, plan.train_indices(j))
            try:
                nm = fit_all(train, spec, eps, provenance=f"complement of fold {j}")
            except FitError as exc:
                raise DegenerateFoldError(str(exc)) from exc
            idx = plan.fold_indices(j)
            phi[:, idx], plug[:, idx], c = evaluate_influence(nm, data, idx)
            for key in clips:
                clips[key] += c[key]

    quantile = float(norm.ppf(1.0 - alpha / 2.0))
    per_level: dict[str, LevelEstimate] = {}
    for a, lev in enumerate(data.levels):
        est = _column_means(phi[a])
        cov = _sample_cov(phi[a])
        hw = quantile * np.sqrt(np.diag(cov) / n)
        per_level[lev] = LevelEstimate(lev, est, cov, est - hw, est + hw,
                                       _column_means(plug[a]))

    contrasts = []
    for a in range(k):
        for b in range(a):
            rows = phi[a] - phi[b]
            est = per_level[data.levels[a]].estimate - per_level[data.levels[b]].estimate
            cov = _sample_cov(rows)
            hw = quantile * np.sqrt(np.diag(cov) / n)
            contrasts.append(ContrastEstimate(data.levels[a], data.levels[b],
                                              est, cov, est - hw, est + hw))

    return EstimateReport(
        levels=data.levels, outcome_names=data.outcome_names, n=n,
        n_folds=plan.n_folds, seed=seed, eps=eps, alpha=alpha,
        per_level=per_level, contrasts=tuple(contrasts), clipping=clips,
        fold_plan=plan, no_split_unsafe=no_split_unsafe,
        influence=phi, plugin_rows=plug,
    )


def plugin_estimate(data: Dataset, spec: LearnerSpec, n_folds: int = 2,
                    seed: int = 0, eps: float = 0.01) -> dict[str, np.ndarray]:
    """Uncorrected plug-in (average of weighted_outcome / propensity) per level.

    Uses the same cross-fit pipeline as :func:`crossfit_estimate`, so the
    difference from the one-step isolates the influence correction exactly.
    """
    report = crossfit_estimate(data, spec, n_folds=n_folds, seed=seed, eps=eps)
    return {lev: le.plugin for lev, le in report.per_level.items()}
