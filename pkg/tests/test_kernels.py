import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tieredrag import kernels

pytestmark = pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled extension not built")

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@st.composite
def rows_and_query(draw):
    n = draw(st.integers(0, 40))
    d = draw(st.integers(1, 12))
    rows = draw(arrays(np.float32, (n, d), elements=finite))
    q = draw(arrays(np.float64, d, elements=st.floats(-1e3, 1e3, allow_nan=False)))
    return rows, q


@given(rows_and_query(), st.booleans())
@settings(max_examples=150, deadline=None)
def test_float_scan_backends_bit_identical(data, ip):
    rows, q = data
    a = kernels.row_distances(rows, q, inner_product=ip, backend="numpy")
    b = kernels.row_distances(rows, q, inner_product=ip, backend="cython")
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 30), st.integers(1, 10), st.integers(0, 2**31 - 1), st.booleans())
@settings(max_examples=80, deadline=None)
def test_sq8_scan_backends_bit_identical(n, d, seed, ip):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 256, size=(n, d), dtype=np.uint8)
    scale, offset, q = rng.uniform(1e-3, 1, d), rng.normal(size=d), rng.normal(size=d)
    a = kernels.row_distances(codes, q, ip, scale, offset, backend="numpy")
    b = kernels.row_distances(codes, q, ip, scale, offset, backend="cython")
    assert a.tobytes() == b.tobytes()


@given(st.integers(1, 20), st.integers(1, 30), st.integers(1, 9), st.integers(0, 2**31 - 1), st.booleans())
@settings(max_examples=80, deadline=None)
def test_pairwise_backends_bit_identical(nq, nc, d, seed, ip):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(nq, d))
    c = rng.normal(size=(nc, d)).astype(np.float32)
    a = kernels.pairwise_distances(q, c, ip, backend="numpy")
    b = kernels.pairwise_distances(q, c, ip, backend="cython")
    assert a.tobytes() == b.tobytes()
    # pairwise and per-row scans agree so coarse and fine distances are the same numbers
    for i in range(nq):
        assert np.array_equal(a[i], kernels.row_distances(c, q[i], ip, backend="numpy"))


def test_values_match_independent_formula():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(50, 7)).astype(np.float32)
    q = rng.normal(size=7)
    l2 = kernels.row_distances(rows, q)
    ip = kernels.row_distances(rows, q, inner_product=True)
    np.testing.assert_allclose(l2, ((rows.astype(np.float64) - q) ** 2).sum(1), rtol=1e-12)
    np.testing.assert_allclose(ip, -(rows.astype(np.float64) @ q), rtol=1e-12, atol=1e-12)


def test_empty_rows():
    out = kernels.row_distances(np.empty((0, 4), np.float32), np.zeros(4))
    assert out.shape == (0,)
