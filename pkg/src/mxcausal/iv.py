"""Local average treatment effects with a partially missing binary instrument.

The dataset carries the instrument as the (possibly missing) exposure and a
bivariate outcome whose first coordinate is the binary treatment and second
the outcome of interest. The effect among compliers is the ratio of the
instrument-effect contrasts on the two coordinates; inference is by the
delta method on the influence rows of the underlying estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import Dataset, require_valid
from .errors import DataValidationError, NoCompliersError, WeakInstrumentError
from .estimator import crossfit_estimate
from .lab import DiscreteLaw, psi_true
from .nuisance import LearnerSpec

TREATMENT_COORD, OUTCOME_COORD = 0, 1


def validate_iv(data: Dataset) -> None:
    """Structural requirements beyond the base checks: binary instrument, and a
    bivariate outcome whose first coordinate is a binary treatment."""
    require_valid(data)
    if data.k != 2:
        raise DataValidationError(f"instrument must be binary, found {data.k} levels")
    if data.p != 2:
        raise DataValidationError(
            f"need outcomes (treatment, outcome), found {data.p} coordinate(s)")
    a = data.y[:, TREATMENT_COORD]
    if not np.all((a == 0.0) | (a == 1.0)):
        raise DataValidationError("first outcome coordinate must be a binary treatment")


@dataclass(frozen=True)
class LATEReport:
    theta: float
    se: float
    wald_lower: float
    wald_upper: float
    numerator: float          # instrument effect on the outcome
    denominator: float        # instrument effect on the treatment (first stage)
    weak_instrument: bool     # first stage not clearly above the guard
    n: int
    alpha: float
    delta: float


def late_estimate(data: Dataset, spec: LearnerSpec, n_folds: int = 2, seed: int = 0,
                  eps: float = 0.01, alpha: float = 0.05,
                  delta: float = 0.01) -> LATEReport:
    """Cross-fitted ratio estimator of the complier average effect.

    The standard error plugs the estimated ratio into the limiting variance;
    a first-stage contrast below ``delta`` in magnitude raises instead of
    returning an unstable ratio.
    """
    validate_iv(data)
    report = crossfit_estimate(data, spec, n_folds=n_folds, seed=seed,
                               eps=eps, alpha=alpha)
    lev1, lev0 = data.levels[1], data.levels[0]
    rows1, rows0 = report.influence[1], report.influence[0]
    num_rows = rows1[:, OUTCOME_COORD] - rows0[:, OUTCOME_COORD]
    den_rows = rows1[:, TREATMENT_COORD] - rows0[:, TREATMENT_COORD]

    n = data.n
    num = math.fsum(num_rows) / n
    den = math.fsum(den_rows) / n
    if abs(den) < delta:
        raise WeakInstrumentError(
            f"first-stage contrast {den:.6g} below guard {delta:.6g}")

    theta = num / den
    resid = num_rows - theta * den_rows
    se = float(np.std(resid, ddof=1)) / abs(den) / math.sqrt(n)
    q = float(norm.ppf(1.0 - alpha / 2.0))
    se_den = float(np.std(den_rows, ddof=1)) / math.sqrt(n)
    weak = abs(den) - q * se_den < delta
    return LATEReport(
        theta=float(theta), se=se,
        wald_lower=float(theta - q * se), wald_upper=float(theta + q * se),
        numerator=float(num), denominator=float(den),
        weak_instrument=bool(weak), n=n, alpha=alpha, delta=delta,
    )


def late_identify(law: DiscreteLaw) -> float:
    """Exact complier-effect value by enumeration of the identifying ratio."""
    if law.k != 2 or law.p != 2:
        raise DataValidationError("law must have a binary instrument and (treatment, outcome)")
    psi = psi_true(law)                      # (2, 2)
    num = psi[1, OUTCOME_COORD] - psi[0, OUTCOME_COORD]
    den = psi[1, TREATMENT_COORD] - psi[0, TREATMENT_COORD]
    if abs(den) < 1e-12:
        raise NoCompliersError("instrument has no effect on treatment")
    return float(num / den)
