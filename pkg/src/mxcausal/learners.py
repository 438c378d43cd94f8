"""Built-in regression / classification learners behind pluggable interfaces.

Four families:

* ``logistic`` -- multinomial logistic regression fit by iteratively
  reweighted least squares with ridge damping; its regression face is
  ridge-damped linear least squares on the same basis.
* ``kernel``   -- Nadaraya-Watson smoothing with a Gaussian product kernel
  and Silverman rule-of-thumb bandwidths (see :mod:`mxcausal.smoothing`).
* ``constant`` -- weighted sample means / class frequencies.
* ``oracle``   -- handled upstream (wraps known true functions, no fitting).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, FitError
from .smoothing import nw_predict, silverman_bandwidths

MAX_SCORE = 35.0  # logit clamp; exp(35) is safely inside float range


@dataclass(frozen=True)
class LearnerChoice:
    """Configuration of a single learner: family, basis and hyperparameters."""

    name: str = "logistic"
    basis: str = "raw"  # raw | quadratic
    ridge: float = 1e-6
    bandwidth_scale: float = 1.0
    bandwidths: Optional[tuple[float, ...]] = None
    max_iter: int = 100

    def __post_init__(self):
        if self.name not in ("logistic", "kernel", "constant", "oracle"):
            raise ConfigError(f"unknown learner {self.name!r}")
        if self.basis not in ("raw", "quadratic"):
            raise ConfigError(f"unknown basis {self.basis!r}")


def expand_basis(x: np.ndarray, kind: str) -> np.ndarray:
    """Feature expansion: 'raw' passes through, 'quadratic' adds squares and products."""
    x = np.atleast_2d(np.asarray(x, float))
    if kind == "raw":
        return x
    cols = [x]
    d = x.shape[1]
    cols.append(x ** 2)
    for i in range(d):
        for j in range(i + 1, d):
            cols.append((x[:, i] * x[:, j])[:, None])
    return np.hstack(cols)


def clip_renormalize(v: np.ndarray, lo: float, hi: float, iters: int = 60) -> np.ndarray:
    """Force rows of ``v`` into the simplex intersected with [lo, hi].

    Alternates clipping and renormalization to a fixed point; converges for
    any lo*k <= 1 <= hi*k.
    """
    w = np.array(v, dtype=float)
    for _ in range(iters):
        np.clip(w, lo, hi, out=w)
        s = w.sum(axis=-1, keepdims=True)
        w /= s
        if np.all(np.abs(s - 1.0) < 1e-14):
            break
    np.clip(w, lo, hi, out=w)
    w /= w.sum(axis=-1, keepdims=True)
    return w


class Regressor(ABC):
    """Fits targets on real feature vectors; predictions are finite and deterministic."""

    @abstractmethod
    def fit(self, x: np.ndarray, t: np.ndarray, sample_weight=None) -> "Regressor":
        ...

    @abstractmethod
    def predict(self, x: np.ndarray) -> np.ndarray:
        ...


class ProbabilisticClassifier(ABC):
    """Fits class labels (integer-coded); predict_proba rows lie on the simplex."""

    @abstractmethod
    def fit(self, x: np.ndarray, labels: np.ndarray, n_classes: int,
            sample_weight=None) -> "ProbabilisticClassifier":
        ...

    @abstractmethod
    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        ...


def _design(x: np.ndarray, basis: str) -> np.ndarray:
    phi = expand_basis(x, basis)
    return np.hstack([np.ones((phi.shape[0], 1)), phi])


class MultinomialLogistic(ProbabilisticClassifier):
    """Softmax regression by damped Newton (IRLS); binary is the k=2 case.

    Ridge damping keeps the Hessian invertible under separation; scores are
    clamped so separable fits terminate with probabilities at the clamp.
    """

    def __init__(self, basis: str = "raw", ridge: float = 1e-6, max_iter: int = 100,
                 tol: float = 1e-10):
        self.basis = basis
        self.ridge = ridge
        self.max_iter = max_iter
        self.tol = tol
        self.coef_: Optional[np.ndarray] = None  # (k-1, q), last class is reference

    def fit(self, x, labels, n_classes, sample_weight=None):
        phi = _design(x, self.basis)
        n, q = phi.shape
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise FitError("class labels out of range")
        sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
        k = n_classes
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0

        b = np.zeros((k - 1, q))
        for _ in range(self.max_iter):
            probs = self._probs(phi, b)
            grad = np.empty((k - 1) * q)
            for a in range(k - 1):
                grad[a * q:(a + 1) * q] = phi.T @ (sw * (onehot[:, a] - probs[:, a]))
            info = np.zeros(((k - 1) * q, (k - 1) * q))
            for a in range(k - 1):
                for c in range(a, k - 1):
                    w = sw * probs[:, a] * ((1.0 if a == c else 0.0) - probs[:, c])
                    block = phi.T @ (phi * w[:, None])
                    info[a * q:(a + 1) * q, c * q:(c + 1) * q] = block
                    if c != a:
                        info[c * q:(c + 1) * q, a * q:(a + 1) * q] = block
            info[np.diag_indices_from(info)] += self.ridge
            step = np.linalg.solve(info, grad).reshape(k - 1, q)
            b += step
            if np.abs(step).max() < self.tol:
                break
        self.coef_ = b
        self.n_classes_ = k
        return self

    def _probs(self, phi, b):
        scores = np.clip(phi @ b.T, -MAX_SCORE, MAX_SCORE)
        full = np.column_stack([scores, np.zeros(scores.shape[0])])
        full -= full.max(axis=1, keepdims=True)
        e = np.exp(full)
        return e / e.sum(axis=1, keepdims=True)

    def predict_proba(self, x):
        if self.coef_ is None:
            raise FitError("classifier not fitted")
        return self._probs(_design(x, self.basis), self.coef_)


class LinearRidge(Regressor):
    """Least squares with ridge damping on the expanded basis (multi-target)."""

    def __init__(self, basis: str = "raw", ridge: float = 1e-6):
        self.basis = basis
        self.ridge = ridge
        self.coef_: Optional[np.ndarray] = None

    def fit(self, x, t, sample_weight=None):
        phi = _design(x, self.basis)
        t = np.asarray(t, float)
        self._squeeze = t.ndim == 1
        tt = t[:, None] if self._squeeze else t
        sw = np.ones(phi.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
        gram = phi.T @ (phi * sw[:, None])
        gram[np.diag_indices_from(gram)] += self.ridge
        self.coef_ = np.linalg.solve(gram, phi.T @ (tt * sw[:, None]))
        return self

    def predict(self, x):
        if self.coef_ is None:
            raise FitError("regressor not fitted")
        pred = _design(x, self.basis) @ self.coef_
        return pred[:, 0] if self._squeeze else pred


class KernelSmoother(Regressor):
    """Nadaraya-Watson regression; bandwidths by Silverman's rule unless given."""

    def __init__(self, bandwidth_scale: float = 1.0,
                 bandwidths: Optional[tuple[float, ...]] = None):
        self.bandwidth_scale = bandwidth_scale
        self.bandwidths = bandwidths
        self._train = None

    def fit(self, x, t, sample_weight=None):
        x = np.atleast_2d(np.asarray(x, float))
        t = np.asarray(t, float)
        self._squeeze = t.ndim == 1
        if self.bandwidths is not None:
            h = np.asarray(self.bandwidths, float)
            if h.size == 1:
                h = np.full(x.shape[1], h.item())
        else:
            h = silverman_bandwidths(x, self.bandwidth_scale)
        self._train = (x, t if not self._squeeze else t[:, None], h,
                       None if sample_weight is None else np.asarray(sample_weight, float))
        return self

    def predict(self, x):
        if self._train is None:
            raise FitError("regressor not fitted")
        xt, tt, h, sw = self._train
        pred = nw_predict(xt, tt, x, h, sample_weight=sw)
        return pred[:, 0] if self._squeeze else pred


class KernelClassifier(ProbabilisticClassifier):
    """NW smoothing of one-hot labels; rows land on the simplex by construction."""

    def __init__(self, bandwidth_scale: float = 1.0,
                 bandwidths: Optional[tuple[float, ...]] = None):
        self._smoother = KernelSmoother(bandwidth_scale, bandwidths)

    def fit(self, x, labels, n_classes, sample_weight=None):
        labels = np.asarray(labels, dtype=np.int64)
        onehot = np.zeros((labels.shape[0], n_classes))
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        self._smoother.fit(x, onehot, sample_weight=sample_weight)
        return self

    def predict_proba(self, x):
        probs = np.clip(self._smoother.predict(np.atleast_2d(np.asarray(x, float))), 0.0, 1.0)
        return probs / probs.sum(axis=1, keepdims=True)


class ConstantRegressor(Regressor):
    def fit(self, x, t, sample_weight=None):
        t = np.asarray(t, float)
        self._squeeze = t.ndim == 1
        tt = t[:, None] if self._squeeze else t
        w = np.ones(tt.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
        self._mean = np.average(tt, axis=0, weights=w)
        return self

    def predict(self, x):
        n = np.atleast_2d(np.asarray(x, float)).shape[0]
        pred = np.tile(self._mean, (n, 1))
        return pred[:, 0] if self._squeeze else pred


class ConstantClassifier(ProbabilisticClassifier):
    def fit(self, x, labels, n_classes, sample_weight=None):
        labels = np.asarray(labels, dtype=np.int64)
        w = np.ones(labels.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
        freqs = np.array([w[labels == a].sum() for a in range(n_classes)])
        self._freqs = freqs / freqs.sum()
        return self

    def predict_proba(self, x):
        n = np.atleast_2d(np.asarray(x, float)).shape[0]
        return np.tile(self._freqs, (n, 1))


def make_regressor(choice: LearnerChoice) -> Regressor:
    if choice.name == "logistic":
        return LinearRidge(basis=choice.basis, ridge=choice.ridge)
    if choice.name == "kernel":
        return KernelSmoother(choice.bandwidth_scale, choice.bandwidths)
    if choice.name == "constant":
        return ConstantRegressor()
    raise ConfigError(f"learner {choice.name!r} cannot act as a regressor")


def make_classifier(choice: LearnerChoice) -> ProbabilisticClassifier:
    if choice.name == "logistic":
        return MultinomialLogistic(basis=choice.basis, ridge=choice.ridge,
                                   max_iter=choice.max_iter)
    if choice.name == "kernel":
        return KernelClassifier(choice.bandwidth_scale, choice.bandwidths)
    if choice.name == "constant":
        return ConstantClassifier()
    raise ConfigError(f"learner {choice.name!r} cannot act as a classifier")
