"""Observed-data records, dataset container and structural validation.

A record is (covariates, observed-flag, optional exposure label, outcomes);
the exposure label is present exactly when the flag is 1. Exposure labels
are kept as strings internally; numeric encodings only exist at the CSV
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataValidationError

MIN_PER_LEVEL_WARN = 10


@dataclass(frozen=True)
class ObservedSample:
    """One record: covariates, observed-flag, optional exposure, outcome vector."""

    covariates: np.ndarray
    observed: bool
    exposure: Optional[str]
    outcomes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "covariates", np.atleast_1d(np.asarray(self.covariates, float)))
        object.__setattr__(self, "outcomes", np.atleast_1d(np.asarray(self.outcomes, float)))
        if self.exposure is not None:
            object.__setattr__(self, "exposure", str(self.exposure))


@dataclass(frozen=True)
class PositivityConfig:
    """Clipping / screening constant for probability nuisances."""

    epsilon: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise DataValidationError(f"epsilon must be in (0, 0.5), got {self.epsilon}")


@dataclass(frozen=True)
class Dataset:
    """Immutable sample container with a fixed treatment-level catalog.

    Array views (X, R, Y, Z index) are materialized once at construction;
    all downstream computation is vectorized over them.
    """

    samples: tuple[ObservedSample, ...]
    levels: tuple[str, ...]
    covariate_names: tuple[str, ...]
    outcome_names: tuple[str, ...]

    x: np.ndarray = field(init=False, repr=False, compare=False)
    r: np.ndarray = field(init=False, repr=False, compare=False)
    y: np.ndarray = field(init=False, repr=False, compare=False)
    z_idx: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "levels", tuple(str(l) for l in self.levels))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "outcome_names", tuple(self.outcome_names))
        n = len(self.samples)
        d, p = len(self.covariate_names), len(self.outcome_names)
        x = np.zeros((n, d))
        y = np.zeros((n, p))
        r = np.zeros(n, dtype=bool)
        z = np.full(n, -1, dtype=np.int64)
        index = {lev: i for i, lev in enumerate(self.levels)}
        for i, s in enumerate(self.samples):
            if s.covariates.shape[0] == d:
                x[i] = s.covariates
            if s.outcomes.shape[0] == p:
                y[i] = s.outcomes
            r[i] = s.observed
            if s.exposure is not None:
                z[i] = index.get(s.exposure, -1)
        for name, arr in (("x", x), ("r", r), ("y", y), ("z_idx", z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def d(self) -> int:
        return len(self.covariate_names)

    @property
    def p(self) -> int:
        return len(self.outcome_names)

    @property
    def k(self) -> int:
        return len(self.levels)

    @classmethod
    def from_arrays(cls, x, observed, exposure, y, levels=None,
                    covariate_names=None, outcome_names=None) -> "Dataset":
        """Build a dataset from arrays; exposure entries may be None where unobserved.

        Levels default to the lexicographically sorted observed labels.
        """
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[0] == 1 and len(observed) > 1:
            x = x.T
        y = np.asarray(y, float)
        if y.ndim == 1:
            y = y[:, None]
        observed = np.asarray(observed, bool)
        exposure = list(exposure)
        if levels is None:
            levels = sorted({str(e) for e in exposure if e is not None})
        samples = tuple(
            ObservedSample(x[i], bool(observed[i]),
                           None if exposure[i] is None else str(exposure[i]), y[i])
            for i in range(len(exposure))
        )
        cov = covariate_names or [f"x{j}" for j in range(x.shape[1])]
        out = outcome_names or [f"y{j}" for j in range(y.shape[1])]
        return cls(samples, tuple(levels), tuple(cov), tuple(out))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]
    warnings: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]


def validate(dataset: Dataset) -> ValidationReport:
    """Run all structural checks; report-style, never raises, never mutates."""
    checks: list[CheckResult] = []
    warnings: list[str] = []

    nonempty = dataset.n > 0
    checks.append(CheckResult("nonempty", nonempty,
                              "" if nonempty else "dataset has no records"))

    dims_ok, dim_detail = True, ""
    for i, s in enumerate(dataset.samples):
        if s.covariates.shape[0] != dataset.d or s.outcomes.shape[0] != dataset.p:
            dims_ok, dim_detail = False, f"record {i} has inconsistent dimensions"
            break
    checks.append(CheckResult("consistent_dimensions", dims_ok, dim_detail))

    flag_ok, flag_detail = True, ""
    for i, s in enumerate(dataset.samples):
        if (s.exposure is not None) != s.observed:
            flag_ok = False
            flag_detail = f"record {i}: exposure presence disagrees with observed flag"
            break
    checks.append(CheckResult("exposure_presence", flag_ok, flag_detail))

    catalog_ok, catalog_detail = True, ""
    level_set = set(dataset.levels)
    for i, s in enumerate(dataset.samples):
        if s.exposure is not None and s.exposure not in level_set:
            catalog_ok = False
            catalog_detail = f"record {i}: exposure {s.exposure!r} not in level catalog"
            break
    checks.append(CheckResult("levels_in_catalog", catalog_ok, catalog_detail))

    k_ok = dataset.k >= 2
    checks.append(CheckResult("at_least_two_levels", k_ok,
                              "" if k_ok else f"need >= 2 treatment levels, have {dataset.k}"))

    any_obs = bool(dataset.r.any()) if nonempty else False
    checks.append(CheckResult("some_observed", any_obs,
                              "" if any_obs else "no record has an observed exposure"))

    counts = _observed_level_counts(dataset)
    missing = [lev for lev in dataset.levels if counts.get(lev, 0) == 0]
    checks.append(CheckResult(
        "level_coverage", not missing,
        "" if not missing else "levels never observed: " + ", ".join(missing)))
    for lev, c in counts.items():
        if 0 < c < MIN_PER_LEVEL_WARN:
            warnings.append(f"level {lev!r} observed only {c} times")

    finite = nonempty and bool(np.isfinite(dataset.x).all() and np.isfinite(dataset.y).all())
    checks.append(CheckResult("finite_values", finite or not nonempty,
                              "" if finite or not nonempty else "non-finite covariate or outcome"))

    return ValidationReport(tuple(checks), tuple(warnings))


def require_valid(dataset: Dataset) -> None:
    report = validate(dataset)
    if not report.ok:
        names = ", ".join(c.name + (f" ({c.detail})" if c.detail else "") for c in report.failures())
        raise DataValidationError(f"dataset failed validation: {names}")


@dataclass(frozen=True)
class DatasetSummary:
    n: int
    d: int
    p: int
    k: int
    missing_rate: float
    observed_level_freqs: dict[str, float]


def summarize(dataset: Dataset) -> DatasetSummary:
    """Counts and rates for a validated dataset."""
    require_valid(dataset)
    n_obs = int(dataset.r.sum())
    counts = _observed_level_counts(dataset)
    freqs = {lev: counts.get(lev, 0) / n_obs for lev in dataset.levels}
    return DatasetSummary(
        n=dataset.n, d=dataset.d, p=dataset.p, k=dataset.k,
        missing_rate=float(np.mean(~dataset.r)),
        observed_level_freqs=freqs,
    )


def _observed_level_counts(dataset: Dataset) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in dataset.samples:
        if s.observed and s.exposure is not None:
            counts[s.exposure] = counts.get(s.exposure, 0) + 1
    return counts
