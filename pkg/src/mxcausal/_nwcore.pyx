# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Gaussian-kernel weighted sums (hot loop of the smoothing learner)."""

from libc.math cimport exp

import numpy as np


def kernel_weighted_sums(const double[:, ::1] train_x, const double[:, ::1] targets,
                         const double[:, ::1] query_x, const double[::1] inv_h):
    """Return S[i, c] = sum_j exp(-0.5 * ||(q_i - x_j) * inv_h||^2) * targets[j, c].

    Row-sequential accumulation: results are bit-identical across runs.
    """
    cdef Py_ssize_t n = train_x.shape[0]
    cdef Py_ssize_t d = train_x.shape[1]
    cdef Py_ssize_t m = targets.shape[1]
    cdef Py_ssize_t q = query_x.shape[0]
    cdef Py_ssize_t i, j, c
    cdef double dist2, diff, w

    out = np.zeros((q, m), dtype=np.float64)
    cdef double[:, ::1] out_v = out

    for i in range(q):
        for j in range(n):
            dist2 = 0.0
            for c in range(d):
                diff = (query_x[i, c] - train_x[j, c]) * inv_h[c]
                dist2 += diff * diff
            w = exp(-0.5 * dist2)
            for c in range(m):
                out_v[i, c] += w * targets[j, c]
    return out
