# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise kernels. Mirrors ``_kernels_py`` exactly in contract."""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow, sqrt, INFINITY

cnp.import_array()


def pair_velocity(const double[:, ::1] x, double p, double q):
    """Return (velocities, bad_i, bad_k); bad_i >= 0 flags a singular coincident pair."""
    cdef Py_ssize_t m = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double r2, r, f, diff
    out = np.zeros((m, d), dtype=np.float64)
    cdef double[:, ::1] v = out
    for i in range(m):
        for k in range(i + 1, m):
            r2 = 0.0
            for j in range(d):
                diff = x[i, j] - x[k, j]
                r2 += diff * diff
            if r2 == 0.0:
                if p > 0.0:
                    continue
                return out, i, k
            r = sqrt(r2)
            f = (pow(r, p) - pow(r, q)) / r
            for j in range(d):
                diff = f * (x[i, j] - x[k, j])
                v[i, j] += diff
                v[k, j] -= diff
    for i in range(m):
        for j in range(d):
            v[i, j] /= m
    return out, -1, -1


def pair_energy(const double[:, ::1] x, double p, double q):
    cdef Py_ssize_t m = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double r2, r, diff, total = 0.0
    for i in range(m):
        for k in range(i + 1, m):
            r2 = 0.0
            for j in range(d):
                diff = x[i, j] - x[k, j]
                r2 += diff * diff
            r = sqrt(r2)
            total += pow(r, q + 1.0) / (q + 1.0) - pow(r, p + 1.0) / (p + 1.0)
    # off-diagonal pairs counted once; the full double sum has each twice
    return total / (<double>m * <double>m)


def chamfer(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double r2, diff, total = 0.0
    best_a = np.full(na, INFINITY)
    best_b = np.full(nb, INFINITY)
    cdef double[::1] ba = best_a
    cdef double[::1] bb = best_b
    for i in range(na):
        for k in range(nb):
            r2 = 0.0
            for j in range(d):
                diff = a[i, j] - b[k, j]
                r2 += diff * diff
            if r2 < ba[i]:
                ba[i] = r2
            if r2 < bb[k]:
                bb[k] = r2
    for i in range(na):
        total += ba[i]
    for k in range(nb):
        total += bb[k]
    return total
