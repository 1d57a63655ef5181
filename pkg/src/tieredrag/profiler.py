"""Access-skew, hit-rate and batch-latency profiling."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .vecstore import IvfIndex, scan_clusters, shortlist_arrays


def calibration_size(n_available: int, fraction: float = 0.005, floor: int = 1000) -> int:
    """Number of calibration queries to draw from a training pool."""
    return min(n_available, max(floor, math.ceil(fraction * n_available)))


# -- access skew --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AccessProfile:
    counts: np.ndarray
    cluster_bytes: np.ndarray
    nprobe: int
    n_queries: int

    @property
    def n_clusters(self) -> int:
        return len(self.counts)

    @property
    def total_accesses(self) -> int:
        return int(self.counts.sum())

    @property
    def ranking(self) -> np.ndarray:
        """Cluster ids by descending access count, ascending id on ties."""
        ids = np.arange(self.n_clusters)
        return np.lexsort((ids, -self.counts))

    def top_share(self, fraction: float) -> float:
        """Share of accesses landing in the top ``fraction`` of clusters."""
        m = math.ceil(fraction * self.n_clusters - 1e-9)
        return float(self.counts[self.ranking[:m]].sum() / self.total_accesses)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "cluster_bytes": self.cluster_bytes.tolist(),
            "nprobe": self.nprobe,
            "n_queries": self.n_queries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccessProfile":
        return cls(
            np.asarray(d["counts"], dtype=np.int64),
            np.asarray(d["cluster_bytes"], dtype=np.int64),
            int(d["nprobe"]),
            int(d["n_queries"]),
        )


def access_from_shortlists(shortlists: np.ndarray, n_clusters: int, cluster_bytes, nprobe: int) -> AccessProfile:
    counts = np.bincount(np.asarray(shortlists).ravel(), minlength=n_clusters).astype(np.int64)
    return AccessProfile(counts, np.asarray(cluster_bytes, dtype=np.int64), nprobe, len(shortlists))


def profile_access(index: IvfIndex, calibration_queries, nprobe: int) -> AccessProfile:
    """Tally how often each cluster appears in a calibration shortlist."""
    if len(calibration_queries) == 0:
        raise ValueError("calibration set is empty")
    short, _ = shortlist_arrays(index, calibration_queries, nprobe)
    return access_from_shortlists(short, index.n_clusters, index.cluster_bytes(), nprobe)


@dataclass(frozen=True, eq=False)
class CoverageCurve:
    """Mean hit rate and hot-set size for every whole number of cached clusters.

    Point ``m`` caches the ``m`` most accessed clusters: ``rho[m] = m / n``.
    """

    rho: np.ndarray
    mean_hitrate: np.ndarray
    hot_bytes: np.ndarray
    ranking: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.ranking)

    def n_hot(self, rho: float) -> int:
        return int(min(self.n_clusters, max(0, math.ceil(rho * self.n_clusters - 1e-9))))

    def eta_at(self, rho: float) -> float:
        return float(self.mean_hitrate[self.n_hot(rho)])

    def bytes_at(self, rho: float) -> int:
        return int(self.hot_bytes[self.n_hot(rho)])

    def hot_set(self, rho: float) -> np.ndarray:
        return np.sort(self.ranking[: self.n_hot(rho)])

    @property
    def points(self) -> list[tuple[float, float, int]]:
        return list(zip(self.rho.tolist(), self.mean_hitrate.tolist(), self.hot_bytes.tolist()))

    def to_dict(self) -> dict:
        return {
            "mean_hitrate": self.mean_hitrate.tolist(),
            "hot_bytes": self.hot_bytes.tolist(),
            "ranking": self.ranking.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageCurve":
        ranking = np.asarray(d["ranking"], dtype=np.int64)
        n = len(ranking)
        return cls(
            np.arange(n + 1) / n,
            np.asarray(d["mean_hitrate"], dtype=np.float64),
            np.asarray(d["hot_bytes"], dtype=np.int64),
            ranking,
        )

    @classmethod
    def from_counts(cls, counts, cluster_bytes=None) -> "CoverageCurve":
        counts = np.asarray(counts, dtype=np.int64)
        nbytes = np.ones_like(counts) if cluster_bytes is None else np.asarray(cluster_bytes, dtype=np.int64)
        return coverage_curve(AccessProfile(counts, nbytes, nprobe=0, n_queries=0))


def coverage_curve(profile: AccessProfile) -> CoverageCurve:
    total = profile.total_accesses
    if total <= 0:
        raise ValueError("access profile is empty")
    ranking = profile.ranking
    n = profile.n_clusters
    hits = np.concatenate([[0], np.cumsum(profile.counts[ranking])])
    nbytes = np.concatenate([[0], np.cumsum(profile.cluster_bytes[ranking])])
    return CoverageCurve(np.arange(n + 1) / n, hits / total, nbytes.astype(np.int64), ranking)


# -- per-query hit rates -------------------------------------------------------


def hitrates_from_shortlists(shortlists: np.ndarray, hot_set: Iterable[int], n_clusters: int) -> np.ndarray:
    mask = np.zeros(n_clusters, dtype=bool)
    mask[np.asarray(list(hot_set), dtype=np.int64)] = True
    shortlists = np.asarray(shortlists)
    return mask[shortlists].sum(axis=1) / shortlists.shape[1]


def measure_hitrates(index: IvfIndex, queries, nprobe: int, hot_set: Iterable[int]) -> np.ndarray:
    """Fraction of each query's probed clusters that fall in ``hot_set``."""
    hot = np.asarray(list(hot_set), dtype=np.int64)
    if hot.size and (hot.min() < 0 or hot.max() >= index.n_clusters):
        raise ValueError("hot set references unknown clusters")
    short, _ = shortlist_arrays(index, queries, nprobe)
    return hitrates_from_shortlists(short, hot, index.n_clusters)


@dataclass(frozen=True)
class SigmaMax:
    sigma2_max: float
    coverage_at_half: float
    mean_at_half: float

    def to_dict(self) -> dict:
        return {"sigma2_max": self.sigma2_max, "coverage_at_half": self.coverage_at_half, "mean_at_half": self.mean_at_half}

    @classmethod
    def from_dict(cls, d: dict) -> "SigmaMax":
        return cls(float(d["sigma2_max"]), float(d["coverage_at_half"]), float(d["mean_at_half"]))


def sigma_max_from_shortlists(shortlists: np.ndarray, curve: CoverageCurve) -> SigmaMax:
    if len(shortlists) < 2:
        raise ValueError("need at least two queries to estimate a variance")
    m = int(np.argmin(np.abs(curve.mean_hitrate - 0.5)))
    rates = hitrates_from_shortlists(shortlists, curve.ranking[:m], curve.n_clusters)
    # population variance keeps the estimate inside [0, 0.25] for [0, 1] data
    return SigmaMax(float(np.var(rates)), float(curve.rho[m]), float(curve.mean_hitrate[m]))


def profile_sigma_max(index: IvfIndex, queries, nprobe: int, curve: CoverageCurve) -> SigmaMax:
    """Per-query hit-rate variance at the coverage whose mean hit rate is nearest 0.5."""
    if len(queries) < 2:
        raise ValueError("need at least two queries to estimate a variance")
    short, _ = shortlist_arrays(index, queries, nprobe)
    return sigma_max_from_shortlists(short, curve)


# -- batch latency ------------------------------------------------------------


@dataclass(frozen=True)
class LatencySample:
    batch_size: int
    t_cq_ms: float
    t_lut_ms: float


def profile_latency(
    index: IvfIndex,
    queries,
    batch_sizes: Sequence[int],
    nprobe: int,
    repetitions: int = 5,
    k: int = 10,
    clock=time.perf_counter,
) -> list[LatencySample]:
    """Wall-clock median of the coarse-quantization and scan stages per batch size.

    One untimed warm-up run precedes the timed repetitions.
    """
    queries = np.asarray(queries, dtype=np.float32)
    if len(queries) == 0:
        raise ValueError("need queries to time")
    samples = []
    for b in batch_sizes:
        if b < 1:
            raise ValueError("batch sizes must be >= 1")
        batch = queries[np.arange(b) % len(queries)]
        cq, lut = [], []
        for rep in range(repetitions + 1):
            t0 = clock()
            short, _ = shortlist_arrays(index, batch, nprobe)
            t1 = clock()
            for i in range(b):
                scan_clusters(index, batch[i], short[i], k)
            t2 = clock()
            if rep:
                cq.append((t1 - t0) * 1e3)
                lut.append((t2 - t1) * 1e3)
        samples.append(LatencySample(int(b), float(np.median(cq)), float(np.median(lut))))
    return samples


@dataclass(frozen=True)
class WorkCostModel:
    """Deterministic stand-in for wall-clock profiling.

    Stage time = fixed overhead + (operations x cost per operation) spread
    over ``min(b, threads)`` workers, which reproduces the single-thread to
    multi-thread knee of a real CPU search. The defaults make the desk index
    behave like a much larger one: a per-batch scan setup cost plus a
    per-query slope of a few milliseconds.
    """

    cq_overhead_ms: float = 2.0
    lut_overhead_ms: float = 40.0
    ns_per_cq_op: float = 30.0
    ns_per_scan_op: float = 120.0
    threads: int = 8
    time_scale: float = 1.0


def modeled_latency(
    index: IvfIndex,
    queries,
    batch_sizes: Sequence[int],
    nprobe: int,
    cost: WorkCostModel = WorkCostModel(),
) -> list[LatencySample]:
    """Latency samples from counted work instead of a clock."""
    queries = np.asarray(queries, dtype=np.float32)
    short, _ = shortlist_arrays(index, queries, nprobe)
    sizes = index.list_sizes()
    per_query_candidates = sizes[short].sum(axis=1)
    mean_candidates = float(per_query_candidates.mean())
    out = []
    for b in batch_sizes:
        workers = min(b, cost.threads)
        cq_ops = b * index.n_clusters * index.dim
        scan_ops = b * mean_candidates * index.dim
        t_cq = cost.cq_overhead_ms + cq_ops * cost.ns_per_cq_op * 1e-6 / workers
        t_lut = cost.lut_overhead_ms + scan_ops * cost.ns_per_scan_op * 1e-6 / workers
        out.append(LatencySample(int(b), t_cq * cost.time_scale, t_lut * cost.time_scale))
    return out


def samples_to_csv(samples: Sequence[LatencySample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["b", "t_cq_ms", "t_lut_ms"])
    for s in samples:
        writer.writerow([s.batch_size, repr(s.t_cq_ms), repr(s.t_lut_ms)])
    return buf.getvalue()


def samples_from_csv(text: str) -> list[LatencySample]:
    rows = csv.DictReader(io.StringIO(text))
    return [LatencySample(int(r["b"]), float(r["t_cq_ms"]), float(r["t_lut_ms"])) for r in rows]


# -- piecewise linear fits ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PiecewiseLinear:
    """Continuous piecewise-linear latency (ms) as a function of batch size.

    ``breakpoints`` has one more entry than ``slopes``; values outside the
    sampled range extrapolate the first or last segment. Evaluation is
    clamped at zero.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    residual_rms: float = 0.0

    def __post_init__(self):
        if len(self.breakpoints) != len(self.slopes) + 1 or len(self.slopes) != len(self.intercepts) or not len(self.slopes):
            raise ValueError("piecewise-linear shape mismatch")
        if not all(np.all(np.isfinite(a)) for a in (self.breakpoints, self.slopes, self.intercepts)):
            raise ValueError("piecewise-linear coefficients must be finite")

    @classmethod
    def linear(cls, intercept: float, slope: float, lo: float = 1.0, hi: float = 2.0) -> "PiecewiseLinear":
        return cls(np.array([lo, hi], float), np.array([slope], float), np.array([intercept], float))

    @classmethod
    def through(cls, xs: Sequence[float], ys: Sequence[float]) -> "PiecewiseLinear":
        """Interpolate the given knots exactly."""
        xs = np.asarray(xs, float)
        ys = np.asarray(ys, float)
        slopes = np.diff(ys) / np.diff(xs)
        return cls(xs, slopes, ys[:-1] - slopes * xs[:-1])

    @property
    def n_segments(self) -> int:
        return len(self.slopes)

    def segment(self, b: float) -> int:
        inner = self.breakpoints[1:-1]
        return int(np.searchsorted(inner, b, side="right"))

    def raw(self, b: float) -> float:
        j = self.segment(b)
        with np.errstate(over="ignore"):
            return float(self.intercepts[j] + self.slopes[j] * b)

    def __call__(self, b: float) -> float:
        return max(0.0, self.raw(b))

    def to_dict(self) -> dict:
        return {
            "breakpoints": self.breakpoints.tolist(),
            "slopes": self.slopes.tolist(),
            "intercepts": self.intercepts.tolist(),
            "residual_rms": self.residual_rms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseLinear":
        return cls(
            np.asarray(d["breakpoints"], float),
            np.asarray(d["slopes"], float),
            np.asarray(d["intercepts"], float),
            float(d.get("residual_rms", 0.0)),
        )


def _hinge_fit(x: np.ndarray, y: np.ndarray, knots: tuple) -> tuple[np.ndarray, float]:
    cols = [np.ones_like(x), x] + [np.maximum(x - k, 0.0) for k in knots]
    design = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    rss = float(np.sum((design @ coef - y) ** 2))
    return coef, rss


def fit_piecewise_linear(batch_sizes, latencies, max_segments: int = 3) -> PiecewiseLinear:
    """Continuous segmented least-squares fit.

    Knots are searched exhaustively among the sampled interior batch sizes.
    The segment count is chosen by BIC, so exact data yields the fewest
    segments that reproduce it.
    """
    x = np.asarray(batch_sizes, dtype=np.float64)
    y = np.asarray(latencies, dtype=np.float64)
    if x.shape != y.shape or x.size == 0:
        raise ValueError("batch sizes and latencies must be equal-length, non-empty")
    distinct = np.unique(x)
    if len(distinct) < 2:
        raise ValueError("need at least two distinct batch sizes")
    if max_segments < 1:
        raise ValueError("max_segments must be >= 1")
    interior = distinct[1:-1]
    n = len(x)
    floor = 1e-12 * max(float(np.var(y)), float(np.mean(y * y)), 1e-300)
    best = None
    for n_knots in range(0, min(max_segments - 1, len(interior)) + 1):
        for knots in itertools.combinations(interior.tolist(), n_knots):
            coef, rss = _hinge_fit(x, y, knots)
            score = n * math.log(rss / n + floor) + (2 + 2 * n_knots) * math.log(n)
            if best is None or score < best[0] - 1e-9:
                best = (score, knots, coef, rss)
    _, knots, coef, rss = best
    bps = np.concatenate([[distinct[0]], np.asarray(knots, float), [distinct[-1]]])
    slopes = np.empty(len(knots) + 1)
    intercepts = np.empty(len(knots) + 1)
    for j in range(len(knots) + 1):
        slopes[j] = coef[1] + coef[2 : 2 + j].sum()
        intercepts[j] = coef[0] - float(np.dot(coef[2 : 2 + j], knots[:j]))
    return PiecewiseLinear(bps, slopes, intercepts, math.sqrt(rss / n))


@dataclass(frozen=True, eq=False)
class LatencyModel:
    """Fitted coarse-quantization and scan latency curves (ms vs batch size)."""

    t_cq: PiecewiseLinear
    t_lut: PiecewiseLinear

    def search_ms(self, b: float) -> float:
        return self.t_cq(b) + self.t_lut(b)

    def to_dict(self) -> dict:
        return {"t_cq": self.t_cq.to_dict(), "t_lut": self.t_lut.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        return cls(PiecewiseLinear.from_dict(d["t_cq"]), PiecewiseLinear.from_dict(d["t_lut"]))

    @classmethod
    def fit(cls, samples: Sequence[LatencySample], max_segments: int = 3) -> "LatencyModel":
        b = [s.batch_size for s in samples]
        return cls(
            fit_piecewise_linear(b, [s.t_cq_ms for s in samples], max_segments),
            fit_piecewise_linear(b, [s.t_lut_ms for s in samples], max_segments),
        )
