"""Backend selection for the distance kernels.

The compiled extension is used when it imports; otherwise (or when
``TIEREDRAG_PURE_PYTHON`` is set) the numpy implementation is used. Both
produce identical results, so the choice only affects speed.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("TIEREDRAG_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "numpy" if _impl is _kernels_py else "cython"
BACKENDS = {"numpy": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl


def row_distances(rows, query, inner_product=False, scale=None, offset=None, backend=None):
    """Distance from ``query`` to every stored row.

    ``rows`` is float32 or, with ``scale``/``offset`` given, uint8 scalar codes.
    Inner product is returned negated so smaller is always closer.
    """
    impl = BACKENDS[backend] if backend else _impl
    q = np.ascontiguousarray(query, dtype=np.float64)
    out = np.empty(rows.shape[0], dtype=np.float64)
    if rows.shape[0] == 0:
        return out
    if scale is None:
        fn = impl.rows_ip if inner_product else impl.rows_l2
        fn(np.ascontiguousarray(rows, dtype=np.float32), q, out)
    else:
        fn = impl.rows_ip_sq8 if inner_product else impl.rows_l2_sq8
        fn(np.ascontiguousarray(rows, dtype=np.uint8), scale, offset, q, out)
    return out


def pairwise_distances(queries, centroids, inner_product=False, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    return np.asarray(impl.pairwise(q, c, bool(inner_product)))
