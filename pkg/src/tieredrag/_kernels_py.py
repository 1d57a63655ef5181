"""Numpy fallback for the compiled kernels in ``_kernels.pyx``.

The loops run over dimensions and vectorize over rows, so the floating point
operation order per row matches the compiled code exactly.
"""

import numpy as np


def rows_l2(rows, q, out):
    acc = np.zeros(rows.shape[0], dtype=np.float64)
    for j in range(rows.shape[1]):
        diff = rows[:, j].astype(np.float64) - q[j]
        acc += diff * diff
    out[:] = acc


def rows_ip(rows, q, out):
    acc = np.zeros(rows.shape[0], dtype=np.float64)
    for j in range(rows.shape[1]):
        acc += rows[:, j].astype(np.float64) * q[j]
    out[:] = -acc


def rows_l2_sq8(codes, scale, offset, q, out):
    acc = np.zeros(codes.shape[0], dtype=np.float64)
    for j in range(codes.shape[1]):
        x = offset[j] + scale[j] * codes[:, j].astype(np.float64)
        diff = x - q[j]
        acc += diff * diff
    out[:] = acc


def rows_ip_sq8(codes, scale, offset, q, out):
    acc = np.zeros(codes.shape[0], dtype=np.float64)
    for j in range(codes.shape[1]):
        x = offset[j] + scale[j] * codes[:, j].astype(np.float64)
        acc += x * q[j]
    out[:] = -acc


def pairwise(queries, centroids, inner_product):
    nq, nc = queries.shape[0], centroids.shape[0]
    acc = np.zeros((nq, nc), dtype=np.float64)
    c64 = centroids.astype(np.float64)
    for j in range(queries.shape[1]):
        if inner_product:
            acc += c64[None, :, j] * queries[:, None, j]
        else:
            diff = c64[None, :, j] - queries[:, None, j]
            acc += diff * diff
    return -acc if inner_product else acc
