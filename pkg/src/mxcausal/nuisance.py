"""Fitting and evaluation of the four nuisance functions.

First stage, on records with the exposure observed or on all records:

* ``obs_prob(x, y)``        -- probability the exposure is observed,
* ``exposure_prob(x, y)``   -- exposure distribution given covariates and
                               outcomes among observed records.

Second stage, pseudo-outcome regressions on covariates over all records:

* ``propensity(x)``         -- exposure propensity, the conditional mean of
                               ``exposure_prob``,
* ``weighted_outcome(x)``   -- conditional mean of outcome times
                               ``exposure_prob`` (propensity times the
                               outcome regression).

Probability outputs are clipped / floored at evaluation time and the clip
events are counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Dataset, require_valid
from .errors import ConfigError, FitError
from .learners import LearnerChoice, clip_renormalize, make_classifier, make_regressor

DEGRADABLE = ("obs_prob", "exposure_prob", "propensity", "weighted_outcome")


@dataclass(frozen=True)
class OracleNuisances:
    """Known true nuisance functions, used by the oracle learner in simulations."""

    obs_prob: Callable[[np.ndarray, np.ndarray], np.ndarray]        # (n,)
    exposure_prob: Callable[[np.ndarray, np.ndarray], np.ndarray]   # (n, k)
    propensity: Callable[[np.ndarray], np.ndarray]                  # (n, k)
    weighted_outcome: Callable[[np.ndarray], np.ndarray]            # (n, k, p)


@dataclass(frozen=True)
class LearnerSpec:
    """Which learner fits each nuisance, plus staging and misspecification knobs.

    ``degrade`` lists nuisances whose fit sees covariates replaced by a
    constant (deliberately inconsistent fits for robustness studies).
    ``oracle`` bypasses fitting entirely.
    """

    obs_prob: LearnerChoice = LearnerChoice()
    exposure_prob: LearnerChoice = LearnerChoice()
    second_stage: LearnerChoice = LearnerChoice()
    degrade: frozenset[str] = frozenset()
    nested_split: bool = False
    oracle: Optional[OracleNuisances] = None

    def __post_init__(self):
        bad = set(self.degrade) - set(DEGRADABLE)
        if bad:
            raise ConfigError(f"unknown degrade targets: {sorted(bad)}")

    @classmethod
    def uniform(cls, name: str, basis: str = "raw", **kwargs) -> "LearnerSpec":
        choice = LearnerChoice(name=name, basis=basis, **kwargs)
        return cls(obs_prob=choice, exposure_prob=choice, second_stage=choice)


@dataclass
class NuisanceModel:
    """Evaluable fitted nuisances with the clipping policy applied at evaluation.

    Immutable after construction; evaluation methods are pure and return the
    number of entries that hit a clipping bound alongside the values.
    """

    eps: float
    k: int
    p: int
    provenance: str
    _raw_obs_prob: Callable = field(repr=False)
    _raw_exposure_prob: Callable = field(repr=False)
    _raw_propensity: Callable = field(repr=False)
    _raw_weighted_outcome: Callable = field(repr=False)

    def __post_init__(self):
        if not 0.0 <= self.eps < 0.5:
            raise ConfigError(f"eps must be in [0, 0.5), got {self.eps}")
        if self.eps * self.k >= 1.0:
            raise ConfigError(f"eps={self.eps} too large for {self.k} levels")

    def obs_prob(self, x, y) -> tuple[np.ndarray, int]:
        raw = np.asarray(self._raw_obs_prob(x, y), float)
        lo, hi = self.eps, 1.0 - self.eps
        clipped = np.clip(raw, lo, hi)
        return clipped, int(np.sum((raw < lo) | (raw > hi)))

    def exposure_prob(self, x, y) -> tuple[np.ndarray, int]:
        raw = np.asarray(self._raw_exposure_prob(x, y), float)
        floor = self.eps / self.k
        n_floored = int(np.sum(raw < floor))
        return clip_renormalize(raw, floor, 1.0), n_floored

    def propensity(self, x) -> tuple[np.ndarray, int]:
        raw = np.asarray(self._raw_propensity(x), float)
        lo, hi = self.eps, 1.0 - self.eps
        n_clipped = int(np.sum((raw < lo) | (raw > hi)))
        if self.eps == 0.0:
            return raw / raw.sum(axis=-1, keepdims=True), n_clipped
        return clip_renormalize(raw, lo, hi), n_clipped

    def weighted_outcome(self, x) -> np.ndarray:
        vals = np.asarray(self._raw_weighted_outcome(x), float)
        if not np.isfinite(vals).all():
            raise FitError("non-finite weighted-outcome prediction")
        return vals


def _features(x, y):
    return np.hstack([np.atleast_2d(x), np.atleast_2d(y)])


def _degraded(mat: np.ndarray) -> np.ndarray:
    return np.ones((mat.shape[0], 1))


def fit_pi(train: Dataset, choice: LearnerChoice, eps: float,
           degrade: bool = False) -> Callable:
    """Classifier of the observed-flag on (covariates, outcomes); returns a raw predictor."""
    require_valid(train)
    r = train.r.astype(np.int64)
    if r.min() == r.max():
        raise FitError("cannot fit observation propensity: all records share one flag value")
    feats = _features(train.x, train.y)
    if degrade:
        feats = _degraded(feats)
    clf = make_classifier(choice).fit(feats, r, 2)

    def predict(x, y):
        f = _features(x, y)
        return clf.predict_proba(_degraded(f) if degrade else f)[:, 1]

    return predict


def fit_lambda(train: Dataset, choice: LearnerChoice, eps: float,
               degrade: bool = False) -> Callable:
    """k-class classifier of the exposure on (covariates, outcomes), observed records only."""
    require_valid(train)
    obs = train.r
    z = train.z_idx[obs]
    for idx, lev in enumerate(train.levels):
        if not np.any(z == idx):
            raise FitError(f"level {lev!r} absent among observed records in training fold")
    feats = _features(train.x[obs], train.y[obs])
    if degrade:
        feats = _degraded(feats)
    clf = make_classifier(choice).fit(feats, z, train.k)

    def predict(x, y):
        f = _features(x, y)
        return clf.predict_proba(_degraded(f) if degrade else f)

    return predict


def fit_second_stage(train: Dataset, exposure_prob: Callable, choice: LearnerChoice,
                     eps: float, degrade_propensity: bool = False,
                     degrade_weighted: bool = False) -> tuple[Callable, Callable]:
    """Pseudo-outcome regressions on covariates over all records.

    For each level: regress ``exposure_prob`` evaluations to get the
    propensity, and outcome-times-``exposure_prob`` coordinates to get the
    weighted outcome.
    """
    require_valid(train)
    lam = np.asarray(exposure_prob(train.x, train.y), float)  # (n, k)
    if not np.isfinite(lam).all():
        raise FitError("non-finite pseudo-outcomes in second stage")
    pseudo_w = train.y[:, None, :] * lam[:, :, None]          # (n, k, p)
    n, k = lam.shape
    p = train.p

    x_prop = _degraded(train.x) if degrade_propensity else train.x
    reg_prop = make_regressor(choice).fit(x_prop, lam)

    x_wout = _degraded(train.x) if degrade_weighted else train.x
    reg_wout = make_regressor(choice).fit(x_wout, pseudo_w.reshape(n, k * p))

    def predict_propensity(x):
        x = np.atleast_2d(x)
        return reg_prop.predict(_degraded(x) if degrade_propensity else x)

    def predict_weighted(x):
        x = np.atleast_2d(x)
        flat = reg_wout.predict(_degraded(x) if degrade_weighted else x)
        return flat.reshape(x.shape[0], k, p)

    return predict_propensity, predict_weighted


def fit_all(train: Dataset, spec: LearnerSpec, eps: float,
            provenance: str = "") -> NuisanceModel:
    """Fit all nuisances on one training fold and package them.

    With ``spec.oracle`` set, wraps the known functions (still subject to the
    evaluation-time clipping policy). ``spec.nested_split`` halves the fold
    between the exposure-classifier stage and the pseudo-outcome stage.
    """
    require_valid(train)
    if spec.oracle is not None:
        o = spec.oracle
        return NuisanceModel(eps, train.k, train.p, provenance or "oracle",
                             o.obs_prob, o.exposure_prob, o.propensity, o.weighted_outcome)

    first, second = train, train
    if spec.nested_split:
        half = train.n // 2
        first = _subset(train, np.arange(half))
        second = _subset(train, np.arange(half, train.n))

    try:
        pi_raw = fit_pi(first, spec.obs_prob, eps, degrade="obs_prob" in spec.degrade)
        lam_raw = fit_lambda(first, spec.exposure_prob, eps,
                             degrade="exposure_prob" in spec.degrade)
        prop_raw, wout_raw = fit_second_stage(
            second, lam_raw, spec.second_stage, eps,
            degrade_propensity="propensity" in spec.degrade,
            degrade_weighted="weighted_outcome" in spec.degrade)
    except FitError as exc:
        raise FitError(f"{exc} [fold: {provenance or 'full sample'}]") from exc

    return NuisanceModel(eps, train.k, train.p, provenance or "full sample",
                         pi_raw, lam_raw, prop_raw, wout_raw)


def _subset(dataset: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(tuple(dataset.samples[i] for i in idx), dataset.levels,
                   dataset.covariate_names, dataset.outcome_names)
