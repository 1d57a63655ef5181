# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled distance kernels.

Every routine accumulates in double precision, one dimension at a time, in
ascending dimension order. ``_kernels_py`` performs exactly the same
operations so both backends agree bit for bit.
"""

import numpy as np


def rows_l2(const float[:, ::1] rows, const double[::1] q, double[::1] out):
    cdef Py_ssize_t n = rows.shape[0], d = rows.shape[1], i, j
    cdef double acc, diff
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                diff = <double>rows[i, j] - q[j]
                acc = acc + diff * diff
            out[i] = acc


def rows_ip(const float[:, ::1] rows, const double[::1] q, double[::1] out):
    cdef Py_ssize_t n = rows.shape[0], d = rows.shape[1], i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc = acc + <double>rows[i, j] * q[j]
            out[i] = -acc


def rows_l2_sq8(const unsigned char[:, ::1] codes, const double[::1] scale,
                const double[::1] offset, const double[::1] q, double[::1] out):
    cdef Py_ssize_t n = codes.shape[0], d = codes.shape[1], i, j
    cdef double acc, x, diff
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                x = offset[j] + scale[j] * <double>codes[i, j]
                diff = x - q[j]
                acc = acc + diff * diff
            out[i] = acc


def rows_ip_sq8(const unsigned char[:, ::1] codes, const double[::1] scale,
                const double[::1] offset, const double[::1] q, double[::1] out):
    cdef Py_ssize_t n = codes.shape[0], d = codes.shape[1], i, j
    cdef double acc, x
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                x = offset[j] + scale[j] * <double>codes[i, j]
                acc = acc + x * q[j]
            out[i] = -acc


def pairwise(const double[:, ::1] queries, const float[:, ::1] centroids, bint inner_product):
    cdef Py_ssize_t nq = queries.shape[0], nc = centroids.shape[0], d = queries.shape[1]
    cdef Py_ssize_t a, c, j
    cdef double acc, diff
    result = np.empty((nq, nc), dtype=np.float64)
    cdef double[:, ::1] out = result
    with nogil:
        for a in range(nq):
            for c in range(nc):
                acc = 0.0
                if inner_product:
                    for j in range(d):
                        acc = acc + <double>centroids[c, j] * queries[a, j]
                    out[a, c] = -acc
                else:
                    for j in range(d):
                        diff = <double>centroids[c, j] - queries[a, j]
                        acc = acc + diff * diff
                    out[a, c] = acc
    return result
