# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for the weighted conformal quantile and Gaussian mixtures."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327


def weighted_quantile_sorted(const double[::1] atoms, const double[::1] cum, double total,
                             const double[::1] test_w, double level, double rtol):
    """Quantile for each test weight given merged atoms and their cumulative cal mass."""
    cdef Py_ssize_t n = atoms.shape[0]
    cdef Py_ssize_t m = test_w.shape[0]
    cdef Py_ssize_t i, lo, hi, mid
    cdef double t, z
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] res = out
    for i in range(m):
        z = total + test_w[i]
        if z <= 0.0:
            raise FloatingPointError("degenerate weights: total mass is zero")
        t = level * z * (1.0 - rtol)
        lo = 0
        hi = n
        while lo < hi:
            mid = (lo + hi) >> 1
            if cum[mid] < t:
                lo = mid + 1
            else:
                hi = mid
        res[i] = atoms[lo] if lo < n else INFINITY
    return out


def gaussian_mixture_pdf(const double[:, ::1] y, const double[:, ::1] mu,
                         const double[:, ::1] sigma, const double[:, ::1] coef):
    """out[i, g] = sum_k coef[i, k] * N(y[i, g]; mu[i, k], sigma[i, k]^2)."""
    cdef Py_ssize_t N = y.shape[0]
    cdef Py_ssize_t G = y.shape[1]
    cdef Py_ssize_t H = mu.shape[1]
    cdef Py_ssize_t i, g, k
    cdef double acc, z
    out = np.empty((N, G), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef double[::1] scale = np.empty(H, dtype=np.float64)
    cdef double[::1] inv = np.empty(H, dtype=np.float64)
    for i in range(N):
        for k in range(H):
            inv[k] = 1.0 / sigma[i, k]
            scale[k] = coef[i, k] * INV_SQRT_2PI * inv[k]
        for g in range(G):
            acc = 0.0
            for k in range(H):
                z = (y[i, g] - mu[i, k]) * inv[k]
                acc += scale[k] * exp(-0.5 * z * z)
            res[i, g] = acc
    return out
