"""Gaussian Nadaraya-Watson smoothing with a compiled core and a NumPy fallback.

The backend is chosen once at import: the Cython extension if it built,
otherwise blocked NumPy. Override with the environment variable
``MXCAUSAL_BACKEND`` set to ``compiled`` or ``python``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _nwcore
except ImportError:
    _nwcore = None

_BLOCK = 512


def kernel_weighted_sums_python(train_x, targets, query_x, inv_h):
    """NumPy implementation of the compiled kernel: blocked pairwise Gaussian sums."""
    train_s = train_x * inv_h
    out = np.empty((query_x.shape[0], targets.shape[1]))
    t_sq = np.einsum("ij,ij->i", train_s, train_s)
    for lo in range(0, query_x.shape[0], _BLOCK):
        q = query_x[lo : lo + _BLOCK] * inv_h
        d2 = t_sq[None, :] + np.einsum("ij,ij->i", q, q)[:, None] - 2.0 * (q @ train_s.T)
        np.maximum(d2, 0.0, out=d2)
        out[lo : lo + _BLOCK] = np.exp(-0.5 * d2) @ targets
    return out


def kernel_weighted_sums_compiled(train_x, targets, query_x, inv_h):
    """Compiled kernel; raises if the extension is unavailable."""
    if _nwcore is None:
        raise RuntimeError("compiled smoothing core is not available")
    return _nwcore.kernel_weighted_sums(
        np.ascontiguousarray(train_x, dtype=np.float64),
        np.ascontiguousarray(targets, dtype=np.float64),
        np.ascontiguousarray(query_x, dtype=np.float64),
        np.ascontiguousarray(inv_h, dtype=np.float64),
    )


def _select_backend():
    choice = os.environ.get("MXCAUSAL_BACKEND", "auto").lower()
    if choice == "python":
        return kernel_weighted_sums_python, "python"
    if choice == "compiled":
        return kernel_weighted_sums_compiled, "compiled"
    if choice != "auto":
        raise ValueError(f"MXCAUSAL_BACKEND must be 'auto', 'compiled' or 'python', got {choice!r}")
    if _nwcore is not None:
        return kernel_weighted_sums_compiled, "compiled"
    return kernel_weighted_sums_python, "python"


kernel_weighted_sums, BACKEND = _select_backend()


def silverman_bandwidths(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidths; constant columns get bandwidth 1."""
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    h = sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4)) * scale
    h[h <= 0.0] = 1.0
    return h


def nw_predict(train_x, targets, query_x, bandwidths, sample_weight=None):
    """Nadaraya-Watson predictions for (possibly multi-target) regression.

    Queries whose kernel mass underflows fall back to the (weighted) global
    target mean, so predictions are always finite.
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    squeeze = targets.ndim == 1
    if squeeze:
        targets = targets[:, None]
    w = np.ones(train_x.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
    inv_h = 1.0 / np.asarray(bandwidths, dtype=np.float64)

    stacked = np.column_stack([targets * w[:, None], w])
    sums = kernel_weighted_sums(train_x, stacked, query_x, inv_h)
    num, den = sums[:, :-1], sums[:, -1]

    out = np.empty_like(num)
    ok = den > 1e-300
    out[ok] = num[ok] / den[ok, None]
    if not ok.all():
        out[~ok] = np.average(targets, axis=0, weights=w)
    return out[:, 0] if squeeze else out
