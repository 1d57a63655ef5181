"""Batch-minimum hit-rate model.

Per-query hit rates at a given cache coverage are modeled as a Beta
distribution whose mean comes from the access profile and whose variance
scales as ``4 * sigma2_max * mean * (1 - mean)``. The batch latency depends
on the worst query, so the quantity of interest is the expected minimum of
``B`` independent draws (the first order statistic).
"""

from __future__ import annotations

import functools
import heapq
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

from .profiler import CoverageCurve

log = logging.getLogger(__name__)

MEAN_FLOOR = 1e-4
INFEASIBLE_SHRINK = 0.999
POINT_MASS_VARIANCE = 1e-14
# past this shape total the Beta is normal to well under quadrature tolerance
# and the incomplete beta loses digits near the mean
NORMAL_SHAPE_TOTAL = 1e7

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(15)


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError(f"Beta shape parameters must be finite and positive, got {self.alpha}, {self.beta}")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))

    def pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        logf = (self.alpha - 1.0) * np.log(x) + (self.beta - 1.0) * np.log1p(-x) - special.betaln(self.alpha, self.beta)
        return np.exp(logf)

    def sf(self, x):
        return special.betaincc(self.alpha, self.beta, x)


@dataclass(frozen=True)
class MinHitEstimate:
    batch_size: int
    eta_min: float
    abs_error: float = 0.0


def variance_at(mean: float, sigma2_max: float) -> float:
    """Hit-rate variance at a given mean, peaking at ``sigma2_max`` when mean = 0.5."""
    if not 0.0 <= mean <= 1.0:
        raise ValueError(f"mean hit rate must be in [0, 1], got {mean}")
    if not 0.0 <= sigma2_max <= 0.25:
        raise ValueError(f"sigma2_max must be in [0, 0.25], got {sigma2_max}")
    return 4.0 * sigma2_max * mean * (1.0 - mean)


def beta_from_moments(mean: float, variance: float) -> BetaParams:
    """Method-of-moments Beta fit."""
    if not 0.0 < mean < 1.0:
        raise ValueError(f"mean must be in (0, 1), got {mean}")
    bound = mean * (1.0 - mean)
    if not 0.0 < variance < bound:
        raise ValueError(f"variance {variance} infeasible for mean {mean}: need 0 < var < {bound}")
    nu = bound / variance - 1.0
    return BetaParams(mean * nu, (1.0 - mean) * nu)


def _gauss_legendre(fn, a: float, b: float) -> float:
    half = 0.5 * (b - a)
    x = a + half * (_GL_NODES + 1.0)
    return float(half * np.dot(_GL_WEIGHTS, fn(x)))


def adaptive_quad(
    fn, a: float = 0.0, b: float = 1.0, tol: float = 1e-7, max_intervals: int = 4000, breaks=None
) -> tuple[float, float]:
    """Composite Gauss-Legendre with worst-interval-first bisection.

    Each interval's error is estimated as the change between its one-panel
    and two-panel values; refinement stops once the summed estimate is
    below ``tol``. ``breaks`` optionally seeds interior panel edges.
    Returns (integral, error estimate).
    """

    def panel(lo, hi):
        mid = 0.5 * (lo + hi)
        coarse = _gauss_legendre(fn, lo, hi)
        fine = _gauss_legendre(fn, lo, mid) + _gauss_legendre(fn, mid, hi)
        return (-abs(fine - coarse), lo, hi, fine)

    edges = [a, *sorted(x for x in (breaks or ()) if a < x < b), b]
    heap = [panel(lo, hi) for lo, hi in zip(edges, edges[1:])]
    heapq.heapify(heap)
    n = len(heap)
    while True:
        err = -sum(item[0] for item in heap)
        if not math.isfinite(err):
            raise QuadratureError("integrand produced a non-finite value")
        if err < tol:
            return sum(item[3] for item in heap), err
        if n >= max_intervals:
            raise QuadratureError(f"quadrature did not converge: error estimate {err:.3g} after {n} intervals")
        _, lo, hi, _ = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            raise QuadratureError("interval collapsed below floating point resolution")
        heapq.heappush(heap, panel(lo, mid))
        heapq.heappush(heap, panel(mid, hi))
        n += 1


# Each half of [0, 1] is integrated in s = -log(distance to its endpoint),
# s from log 2 to _S_MAX; past _S_MAX the integrand is a pure exponential
# in s and its tail is added in closed form.
_S_MAX = 690.0
_S_BREAKS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0)


def _half_integral(log_h, decay: float, tol: float, extra_breaks=()) -> tuple[float, float]:
    def h(s):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
            v = np.exp(log_h(s))
        return np.where(np.isfinite(v), v, 0.0)

    body, err = adaptive_quad(h, math.log(2.0), _S_MAX, tol, breaks=(*_S_BREAKS, *extra_breaks))
    tail = float(h(np.array([_S_MAX]))[0]) / decay
    return body + tail, err


@functools.lru_cache(maxsize=1024)
def normal_max_offset(batch_size: int) -> float:
    """E[max of B iid standard normals] = integral of z B phi(z) Phi(z)^(B-1)."""
    B = int(batch_size)

    def f(z):
        return z * np.exp(math.log(B) - 0.5 * z * z - 0.5 * math.log(2 * math.pi) + (B - 1) * special.log_ndtr(z))

    value, _ = adaptive_quad(f, -12.0, 12.0, 1e-10, breaks=tuple(float(k) for k in range(-11, 12)))
    return value


def expected_min_hitrate(params: BetaParams, batch_size: int) -> MinHitEstimate:
    """E[min of B iid draws] = integral of B x f(x) (1 - F(x))^(B-1) over [0, 1].

    The lower half is integrated in x = exp(-s) and the upper half in
    1 - x = exp(-s), using the mirrored incomplete beta there so the
    survival function keeps full precision right next to 1.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    B = int(batch_size)
    if B == 1:
        return MinHitEstimate(1, params.mean, 0.0)
    a, b = params.alpha, params.beta
    if a + b > NORMAL_SHAPE_TOTAL:
        value = params.mean - math.sqrt(params.variance) * normal_max_offset(B)
        return MinHitEstimate(B, min(max(value, 0.0), params.mean), 0.0)
    log_norm = math.log(B) - float(special.betaln(a, b))

    def lower(s):
        # x = e^-s: B x f(x) sf(x)^(B-1) dx, with dx = x ds
        x = np.exp(-s)
        return log_norm - (a + 1.0) * s + (b - 1.0) * np.log1p(-x) + (B - 1) * np.log(special.betaincc(a, b, x))

    def upper(s):
        # y = 1 - x = e^-s, sf(x) = I_y(b, a), dx = y ds
        y = np.exp(-s)
        return log_norm + np.log1p(-y) + (a - 1.0) * np.log1p(-y) - b * s + (B - 1) * np.log(special.betainc(b, a, y))

    # panel edges every standard deviation around the mean so a narrow peak cannot fall between nodes
    sd = math.sqrt(params.variance)
    steps = sd * np.arange(-8, 9)
    near_lo = [-math.log(x) for x in params.mean + steps if 0.0 < x < 0.5]
    near_hi = [-math.log(y) for y in (1.0 - params.mean) - steps if 0.0 < y < 0.5]
    lo, e1 = _half_integral(lower, a + 1.0, 5e-8, near_lo)
    hi, e2 = _half_integral(upper, b * B, 5e-8, near_hi)
    return MinHitEstimate(B, min(max(lo + hi, 0.0), params.mean), e1 + e2)


class McEstimate(NamedTuple):
    value: float
    stderr: float


def mc_min_hitrate_oracle(
    params: BetaParams, batch_size: int, n_samples: int = 1_000_000, seed: int = 0, method: str = "auto"
) -> McEstimate:
    """Monte-Carlo estimate of the expected batch-minimum hit rate.

    ``direct`` draws B Beta variates per sample and takes their minimum.
    ``inverse`` draws the minimum in one step: the minimum of B uniforms
    is Beta(1, B) distributed, and the Beta quantile function maps it to
    the minimum of B Beta variates. ``auto`` uses direct sampling for B <= 4.
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be >= 1e4")
    B = int(batch_size)
    rng = np.random.default_rng(seed)
    if method == "auto":
        method = "direct" if B <= 4 else "inverse"
    if method == "direct":
        mins = np.empty(n_samples)
        chunk = max(1, 4_000_000 // B)
        for start in range(0, n_samples, chunk):
            m = min(chunk, n_samples - start)
            mins[start : start + m] = rng.beta(params.alpha, params.beta, size=(m, B)).min(axis=1)
    elif method == "inverse":
        u = rng.random(n_samples)
        v = -np.expm1(np.log1p(-u) / B)
        mins = special.betaincinv(params.alpha, params.beta, v)
    else:
        raise ValueError(f"unknown method {method!r}")
    return McEstimate(float(mins.mean()), float(mins.std(ddof=1) / math.sqrt(n_samples)))


@functools.lru_cache(maxsize=65536)
def min_hitrate_at(mean: float, sigma2_max: float, batch_size: int) -> float:
    """Expected batch-minimum hit rate for a mean hit rate and profiled sigma2_max.

    Means within ``MEAN_FLOOR`` of 0 or 1, and zero variance, are treated as
    point masses. A variance the Beta family cannot represent is shrunk to
    just under its bound.
    """
    if mean < MEAN_FLOOR or mean > 1.0 - MEAN_FLOOR:
        return float(mean)
    var = variance_at(mean, sigma2_max)
    bound = mean * (1.0 - mean)
    if var <= POINT_MASS_VARIANCE * bound:
        # spread far below quadrature tolerance; also keeps the Beta shapes finite
        return float(mean)
    if var >= bound:
        log.warning("variance %.4g infeasible at mean %.4g; clamping", var, mean)
        var = INFEASIBLE_SHRINK * bound
    return expected_min_hitrate(beta_from_moments(mean, var), batch_size).eta_min


class CoverageChoice(NamedTuple):
    rho: float
    n_hot: int
    saturated: bool


def hitrate_to_coverage(curve: CoverageCurve, sigma2_max: float, batch_size: int, eta_min_target: float) -> CoverageChoice:
    """Smallest cached fraction whose expected batch-minimum hit rate meets the target.

    Searches the curve's whole-cluster grid. When only caching every
    cluster meets the target, the result is flagged saturated.
    """
    if curve.n_clusters == 0:
        raise ValueError("coverage curve is empty")
    if not 0.0 <= eta_min_target <= 1.0:
        raise ValueError(f"target must be in [0, 1], got {eta_min_target}")
    n = curve.n_clusters
    if eta_min_target <= 0.0:
        return CoverageChoice(0.0, 0, False)
    for m in range(1, n):
        if min_hitrate_at(float(curve.mean_hitrate[m]), sigma2_max, int(batch_size)) >= eta_min_target:
            return CoverageChoice(float(curve.rho[m]), m, False)
    return CoverageChoice(1.0, n, True)
