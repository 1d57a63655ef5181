import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tieredrag.profiler import (
    AccessProfile,
    CoverageCurve,
    LatencyModel,
    PiecewiseLinear,
    access_from_shortlists,
    calibration_size,
    coverage_curve,
    fit_piecewise_linear,
    measure_hitrates,
    modeled_latency,
    profile_access,
    profile_latency,
    profile_sigma_max,
    samples_from_csv,
    samples_to_csv,
    sigma_max_from_shortlists,
)
from tieredrag.vecstore import shortlist_arrays


def test_calibration_size_rule():
    assert calibration_size(100_000) == 1000
    assert calibration_size(1_000_000) == 5000
    assert calibration_size(300) == 300


# -- access profile ---------------------------------------------------------------


def test_single_query_profile(small_index, small_queries):
    p = profile_access(small_index, small_queries[:1], 3)
    assert sorted(p.counts[p.counts > 0].tolist()) == [1, 1, 1]
    assert p.total_accesses == 3


def test_identical_queries_concentrate(small_index, small_queries):
    qs = np.repeat(small_queries[:1], 50, axis=0)
    p = profile_access(small_index, qs, 4)
    assert p.top_share(4 / small_index.n_clusters) == 1.0


def test_counts_sum_and_ranking(small_index, small_queries):
    p = profile_access(small_index, small_queries, 5)
    assert p.total_accesses == len(small_queries) * 5
    assert sorted(p.ranking.tolist()) == list(range(small_index.n_clusters))
    c = p.counts[p.ranking]
    assert np.all(np.diff(c) <= 0)


def test_zipf_skew_top20(desk):
    # counted directly from the shortlists, independent of AccessProfile
    short, _ = shortlist_arrays(desk.index, desk.calibration, 16)
    counts = np.bincount(short.ravel(), minlength=256)
    top = np.sort(counts)[::-1][: math.ceil(0.2 * 256)]
    assert top.sum() / counts.sum() > 0.5
    assert desk.profile.top_share(0.2) == pytest.approx(top.sum() / counts.sum(), abs=0)


def test_profile_errors(small_index):
    with pytest.raises(ValueError):
        profile_access(small_index, np.empty((0, small_index.dim)), 2)
    with pytest.raises(ValueError):
        profile_access(small_index, np.zeros((1, small_index.dim + 2)), 2)


# -- coverage curve ---------------------------------------------------------------


def test_curve_endpoints(desk):
    assert desk.curve.eta_at(0.0) == 0.0
    assert desk.curve.eta_at(1.0) == 1.0
    assert desk.curve.bytes_at(0.0) == 0
    assert desk.curve.bytes_at(1.0) == int(desk.index.cluster_bytes().sum())


def test_uniform_counts_quarter():
    curve = CoverageCurve.from_counts(np.full(40, 7))
    assert curve.eta_at(0.25) == pytest.approx(0.25)
    curve = CoverageCurve.from_counts(np.full(30, 3))
    assert abs(curve.eta_at(0.25) - 0.25) <= 1 / 30


@given(st.lists(st.integers(0, 50), min_size=1, max_size=60).filter(lambda c: sum(c) > 0))
def test_curve_monotone_and_prefix_sums(counts):
    counts = np.asarray(counts)
    curve = CoverageCurve.from_counts(counts)
    assert np.all(np.diff(curve.mean_hitrate) >= 0)
    assert curve.mean_hitrate[0] == 0 and curve.mean_hitrate[-1] == pytest.approx(1.0)
    for rho in (0.1, 0.37, 0.5, 0.9):
        m = math.ceil(rho * len(counts) - 1e-9)
        assert curve.n_hot(rho) == m
        assert curve.eta_at(rho) == pytest.approx(np.sort(counts)[::-1][:m].sum() / counts.sum())


def test_empty_profile_rejected():
    with pytest.raises(ValueError):
        coverage_curve(AccessProfile(np.zeros(4, np.int64), np.ones(4, np.int64), 1, 0))


def test_curve_round_trip(desk):
    back = CoverageCurve.from_dict(desk.curve.to_dict())
    assert np.array_equal(back.mean_hitrate, desk.curve.mean_hitrate)
    assert np.array_equal(back.rho, desk.curve.rho)
    back = AccessProfile.from_dict(desk.profile.to_dict())
    assert np.array_equal(back.counts, desk.profile.counts)


# -- hit rates -------------------------------------------------------------------


def test_hitrate_extremes(small_index, small_queries):
    assert np.all(measure_hitrates(small_index, small_queries, 4, range(small_index.n_clusters)) == 1)
    assert np.all(measure_hitrates(small_index, small_queries, 4, []) == 0)
    with pytest.raises(ValueError):
        measure_hitrates(small_index, small_queries, 4, [small_index.n_clusters])


def test_mean_hitrate_equals_curve(desk):
    for rho in (0.05, 0.1, 0.2, 0.5):
        rates = measure_hitrates(desk.index, desk.calibration, 16, desk.curve.hot_set(rho))
        assert rates.mean() == pytest.approx(desk.curve.eta_at(rho), abs=1e-12)


def test_hitrate_grows_with_coverage(desk):
    means = [measure_hitrates(desk.index, desk.calibration, 16, desk.curve.hot_set(r)).mean() for r in (0.05, 0.1, 0.15, 0.2)]
    assert all(b > a for a, b in zip(means, means[1:]))


def test_sigma_max_cases(desk):
    # one shared shortlist: no variance
    same = np.tile(np.arange(4), (10, 1))
    curve = coverage_curve(access_from_shortlists(same, 8, np.ones(8), 4))
    assert sigma_max_from_shortlists(same, curve).sigma2_max == 0.0
    # half the queries fully hot, half fully cold
    split = np.array([[0]] * 50 + [[1]] * 50)
    curve = coverage_curve(access_from_shortlists(split, 2, np.ones(2), 1))
    assert sigma_max_from_shortlists(split, curve).sigma2_max == pytest.approx(0.25)
    # desk: recompute from measured hit rates
    s = desk.sigma
    rates = measure_hitrates(desk.index, desk.calibration, 16, desk.curve.hot_set(s.coverage_at_half))
    assert s.sigma2_max == pytest.approx(float(np.mean((rates - rates.mean()) ** 2)), rel=1e-12)
    assert 0 <= s.sigma2_max <= 0.25
    with pytest.raises(ValueError):
        profile_sigma_max(desk.index, desk.calibration[:1], 16, desk.curve)


# -- latency ----------------------------------------------------------------------


def test_measured_latency_positive_and_grows_with_nprobe(small_index, small_queries):
    lo = profile_latency(small_index, small_queries, [1, 16], nprobe=1, repetitions=5)
    hi = profile_latency(small_index, small_queries, [1, 16], nprobe=32, repetitions=5)
    for s in lo + hi:
        assert s.t_cq_ms > 0 and s.t_lut_ms > 0 and math.isfinite(s.t_lut_ms)
    assert hi[1].t_lut_ms > lo[1].t_lut_ms


def test_modeled_latency_doubling_band(desk):
    samples = modeled_latency(desk.index, desk.calibration, [32, 64, 128, 256], 16)
    for a, b in zip(samples, samples[1:]):
        assert a.t_lut_ms <= b.t_lut_ms <= 2 * a.t_lut_ms


def test_samples_csv_round_trip(desk):
    samples = modeled_latency(desk.index, desk.calibration[:50], [1, 4, 9], 16)
    text = samples_to_csv(samples)
    assert text.splitlines()[0] == "b,t_cq_ms,t_lut_ms"
    assert samples_from_csv(text) == samples


def test_fit_exact_line():
    b = np.array([1, 2, 4, 8, 16, 32, 64])
    f = fit_piecewise_linear(b, 3.5 + 0.25 * b)
    assert f.n_segments == 1
    assert f.slopes[0] == pytest.approx(0.25, rel=1e-9)
    assert f.intercepts[0] == pytest.approx(3.5, rel=1e-9)


def test_fit_two_piece_knee():
    b = np.arange(1, 33)
    y = np.where(b <= 8, 5.0, 5.0 + 2.0 * (b - 8))
    f = fit_piecewise_linear(b, y)
    assert f.n_segments == 2
    assert abs(f.breakpoints[1] - 8) <= 1


def test_fit_constant_and_errors():
    f = fit_piecewise_linear([1, 2, 4, 8], [7.0] * 4)
    assert np.allclose(f.slopes, 0)
    with pytest.raises(ValueError):
        fit_piecewise_linear([4, 4, 4], [1, 2, 3])


@given(st.lists(st.floats(0.1, 100), min_size=6, max_size=6))
@settings(max_examples=50, deadline=None)
def test_fit_continuous_at_breakpoints(ys):
    b = [1, 2, 4, 8, 16, 32]
    f = fit_piecewise_linear(b, ys)
    for j, bp in enumerate(f.breakpoints[1:-1]):
        left = f.intercepts[j] + f.slopes[j] * bp
        right = f.intercepts[j + 1] + f.slopes[j + 1] * bp
        assert abs(left - right) <= 1e-9 * max(1.0, abs(left))


def test_latency_model_round_trip(desk):
    m = LatencyModel.from_dict(desk.latency.to_dict())
    for b in (1, 7, 33, 500):
        assert m.search_ms(b) == desk.latency.search_ms(b)
    lin = PiecewiseLinear.linear(2.0, 0.5)
    assert lin(8) == 6.0
