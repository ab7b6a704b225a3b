# cython: language_level=3
"""Compiled hot kernels: counter-based normals, KDE scores, pairwise distance sums.

Every kernel has a numpy twin in ``_kernels_py``; ``kernels`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, cos, exp, M_PI
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_POW_M53 = 1.1102230246251565e-16


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = z + GOLDEN
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _unit(uint64_t w) noexcept nogil:
    # strictly inside (0, 1)
    return ((<double>(w >> 11)) + 0.5) * TWO_POW_M53


def counter_normals(uint64_t seed, int64_t start, int64_t count, uint64_t step, int k):
    """Standard normals for particles ``start .. start+count-1`` at ``step``.

    Each value depends only on (seed, particle index, step, coordinate).
    """
    out = np.empty((count, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef int64_t i
    cdef int j
    cdef uint64_t key = _mix(seed)
    cdef uint64_t h
    cdef double u1, u2
    with nogil:
        for i in range(count):
            h = _mix(_mix(key ^ <uint64_t>(start + i)) ^ step)
            for j in range(k):
                u1 = _unit(_mix(h ^ <uint64_t>(2 * j)))
                u2 = _unit(_mix(h ^ <uint64_t>(2 * j + 1)))
                o[i, j] = sqrt(-2.0 * log(u1)) * cos(2.0 * M_PI * u2)
    return out


def kde_score(const double[:, ::1] points, const double[:, ::1] queries, double h):
    """Score of a Gaussian-kernel density estimate at each query row."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t m = queries.shape[0]
    cdef Py_ssize_t k = points.shape[1]
    out = np.zeros((m, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    logw_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] logw = logw_arr
    cdef Py_ssize_t q, i, j
    cdef double d, r2, mx, w, tot, inv_h2 = 1.0 / (h * h)
    with nogil:
        for q in range(m):
            mx = -1e308
            for i in range(n):
                r2 = 0.0
                for j in range(k):
                    d = queries[q, j] - points[i, j]
                    r2 = r2 + d * d
                logw[i] = -0.5 * r2 * inv_h2
                if logw[i] > mx:
                    mx = logw[i]
            tot = 0.0
            for i in range(n):
                w = exp(logw[i] - mx)
                tot = tot + w
                for j in range(k):
                    o[q, j] = o[q, j] + w * (points[i, j] - queries[q, j])
            for j in range(k):
                o[q, j] = o[q, j] * inv_h2 / tot
    return out


def pairwise_row_sums(const double[:, ::1] a, const double[:, ::1] b):
    """``out[i] = sum_j ||a_i - b_j||``."""
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    out = np.zeros(na, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j, c
    cdef double d, r2, acc
    with nogil:
        for i in range(na):
            acc = 0.0
            for j in range(nb):
                r2 = 0.0
                for c in range(k):
                    d = a[i, c] - b[j, c]
                    r2 = r2 + d * d
                acc = acc + sqrt(r2)
            o[i] = acc
    return out
