"""Runtime hybrid retrieval over fast-tier shards and the host index.

Each batch is coarse-quantized once on the host. Shortlists are split by the
current shard map into per-shard tasks and a cold task. Tier workers push
partial results onto one completion queue, and a dispatcher merges them as
they arrive. Timing is modeled from the fitted latency curves so that runs
are reproducible; the scans themselves are real.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence, TextIO

import numpy as np

from .partitioner import LlmModel, MemoryModel, PartitionPlan, SloConfig, partition
from .profiler import AccessProfile, CoverageCurve, LatencyModel, coverage_curve
from .splitter import IndexSplit, ShardMap, remap, split_index
from .vecstore import IvfIndex, TopK, _finite_2d, scan_clusters, select_topk, shortlist_arrays

log = logging.getLogger(__name__)

COLD = -1


class StaleMapError(RuntimeError):
    pass


@dataclass(frozen=True)
class RetrievalRequest:
    request_id: int
    query: np.ndarray
    nprobe: int
    k: int
    arrival_ms: float = 0.0

    def __post_init__(self):
        if self.nprobe < 1 or self.k < 1:
            raise ValueError("nprobe and k must be >= 1")


@dataclass(frozen=True)
class TierTask:
    """Work for one tier: request position -> cluster ids on that tier.

    ``local`` holds shard-local ids (global ids for the cold tier);
    ``global_ids`` the same clusters by global id, used for fallback.
    """

    tier: int
    local: dict
    global_ids: dict

    @property
    def is_cold(self) -> bool:
        return self.tier == COLD

    def probes(self, pos: int) -> int:
        return len(self.local.get(pos, ()))


@dataclass(frozen=True)
class CompletionEvent:
    request_id: int
    partial: TopK | None
    tier: int
    completion_ms: float
    error: str | None = None


@dataclass(frozen=True, eq=False)
class MapSnapshot:
    """An immutable routing epoch. Shards in ``swapping`` are routed cold."""

    version: int
    shard_map: ShardMap
    shards: tuple
    swapping: frozenset = frozenset()
    expected_eta: float = 0.0


@dataclass(frozen=True, eq=False)
class RoutedBatch:
    requests: tuple
    snapshot: MapSnapshot
    shortlists: tuple
    tasks: tuple


@dataclass(frozen=True, eq=False)
class BatchResult:
    results: tuple
    release_ms: np.ndarray
    tier_done_ms: dict
    hit_rates: np.ndarray
    batch_ms: float
    map_version: int
    fallbacks: int = 0


def merge_rerank(partials: Sequence[TopK], k: int) -> TopK:
    """Global top-k of the union of partial results."""
    if not partials:
        raise ValueError("nothing to merge")
    qid = partials[0].query_id
    if any(p.query_id != qid for p in partials):
        raise ValueError("partials belong to different queries")
    ids = np.concatenate([p.ids for p in partials])
    dists = np.concatenate([p.distances for p in partials])
    if len(np.unique(ids)) != len(ids):
        raise AssertionError("duplicate vector ids across tiers")
    return select_topk(ids, dists, k, qid)


def route_batch(requests: Sequence[RetrievalRequest], snapshot: MapSnapshot, index: IvfIndex) -> RoutedBatch:
    """Coarse-quantize the batch once and split every shortlist by tier.

    Only tiers with work get a task.
    """
    if not requests:
        raise ValueError("empty batch")
    if snapshot.shard_map.n_clusters != index.n_clusters:
        raise StaleMapError("shard map does not match the index")
    q = _finite_2d("queries", np.stack([r.query for r in requests]), index.dim)
    short, _ = shortlist_arrays(index, q, max(r.nprobe for r in requests))
    # a stable sort makes each shorter shortlist a prefix of the longest one
    shortlists = tuple(short[i, : min(r.nprobe, index.n_clusters)].copy() for i, r in enumerate(requests))
    local: dict[int, dict] = {}
    glob: dict[int, dict] = {}
    for pos, sl in enumerate(shortlists):
        routed = remap(snapshot.shard_map, sl, snapshot.swapping)
        for s, lids in routed.per_shard.items():
            local.setdefault(s, {})[pos] = lids
            glob.setdefault(s, {})[pos] = [int(g) for g in snapshot.shards[s].global_ids[lids]]
        if routed.cold:
            local.setdefault(COLD, {})[pos] = routed.cold
            glob.setdefault(COLD, {})[pos] = routed.cold
    tasks = tuple(TierTask(t, local[t], glob[t]) for t in sorted(local))
    return RoutedBatch(tuple(requests), snapshot, shortlists, tasks)


@dataclass(frozen=True)
class TimingModel:
    latency: LatencyModel
    gpu_speedup: float = 10.0

    def cq_ms(self, b: int) -> float:
        return self.latency.t_cq(b)

    def cold_ms(self, b: int, probes: int, nprobe: int) -> float:
        """Host scan time for one query's cold probes (queries scan in parallel)."""
        return probes / nprobe * self.latency.t_lut(b)

    def shard_ms(self, b: int, max_probes: int, nprobe: int) -> float:
        """A shard finishes the batch at once, paced by its busiest query."""
        return max_probes / nprobe * self.latency.t_lut(b) / self.gpu_speedup


class Engine:
    """Hybrid search engine with versioned shard maps and per-tier workers.

    The cold tier scans the full host index, so any cluster can be served on
    the host while its shard is being replaced or after a shard failure.
    """

    def __init__(
        self,
        index: IvfIndex,
        split: IndexSplit,
        timing: TimingModel,
        expected_eta: float = 0.0,
        slo_search_ms: float = float("inf"),
    ):
        self.index = index
        self.timing = timing
        self.slo_search_ms = slo_search_ms
        self._lock = threading.Lock()
        self._snapshot = MapSnapshot(0, split.shard_map.with_version(0), split.shards, frozenset(), expected_eta)
        self._pools: dict[int, ThreadPoolExecutor] = {}
        self.failing: set[int] = set()
        self.plan: PartitionPlan | None = None

    @property
    def snapshot(self) -> MapSnapshot:
        with self._lock:
            return self._snapshot

    def publish(self, shard_map: ShardMap, shards: tuple, swapping=frozenset(), expected_eta: float | None = None) -> MapSnapshot:
        with self._lock:
            old = self._snapshot
            eta = old.expected_eta if expected_eta is None else expected_eta
            version = old.version + 1
            self._snapshot = MapSnapshot(version, shard_map.with_version(version), tuple(shards), frozenset(swapping), eta)
            return self._snapshot

    def _pool(self, tier: int) -> ThreadPoolExecutor:
        with self._lock:
            if tier not in self._pools:
                self._pools[tier] = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"tier{tier}")
            return self._pools[tier]

    def close(self) -> None:
        with self._lock:
            pools, self._pools = self._pools, {}
        for p in pools.values():
            p.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def route(self, requests: Sequence[RetrievalRequest]) -> RoutedBatch:
        return route_batch(requests, self.snapshot, self.index)

    def search(self, requests: Sequence[RetrievalRequest], dispatcher_on: bool = True) -> BatchResult:
        return self.execute(self.route(requests), dispatcher_on)

    def execute(self, routed: RoutedBatch, dispatcher_on: bool = True) -> BatchResult:
        return execute_hybrid(self, routed, dispatcher_on)

    # -- tier workers ---------------------------------------------------------

    def _run_shard(self, snapshot: MapSnapshot, task: TierTask, routed: RoutedBatch, done_ms: float, out: queue.Queue):
        try:
            if task.tier in self.failing:
                raise RuntimeError(f"shard {task.tier} unavailable")
            shard = snapshot.shards[task.tier]
            for pos in sorted(task.local):
                req = routed.requests[pos]
                partial = shard.scan(req.query, task.local[pos], req.k, query_id=req.request_id)
                out.put(CompletionEvent(req.request_id, partial, task.tier, done_ms))
        except Exception as exc:  # reported to the dispatcher, which falls back
            out.put(CompletionEvent(-1, None, task.tier, done_ms, error=repr(exc)))

    def _run_cold(self, work: Sequence[tuple[int, list]], routed: RoutedBatch, done: Callable[[int], float], out: queue.Queue, tier: int):
        # one callback per query, after its cluster group is scanned
        for pos, clusters in work:
            req = routed.requests[pos]
            partial = scan_clusters(self.index, req.query, clusters, req.k, query_id=req.request_id)
            out.put(CompletionEvent(req.request_id, partial, tier, done(pos)))


def execute_hybrid(engine: Engine, routed: RoutedBatch, dispatcher_on: bool = True) -> BatchResult:
    """Run every tier task and merge partials per request.

    Modeled times are relative to the batch start. With the dispatcher on,
    each request is released once all of its tiers are done; with it off,
    every request waits for the slowest tier.
    """
    reqs = routed.requests
    b = len(reqs)
    nprobe = max(r.nprobe for r in reqs)
    t = engine.timing
    cq = t.cq_ms(b)
    pos_of = {r.request_id: i for i, r in enumerate(reqs)}
    if len(pos_of) != b:
        raise ValueError("request ids in a batch must be unique")

    cold_probes = np.zeros(b, dtype=np.int64)
    expected = [set() for _ in range(b)]
    for task in routed.tasks:
        for pos in task.local:
            expected[pos].add(task.tier)
            if task.is_cold:
                cold_probes[pos] = task.probes(pos)
    for pos in range(b):
        if not expected[pos]:
            expected[pos].add(COLD)  # nothing to scan; the host answers with an empty result

    extra_cold = np.zeros(b, dtype=np.int64)
    tier_done: dict[int, float] = {}
    for task in routed.tasks:
        if not task.is_cold:
            busiest = max(task.probes(p) for p in task.local)
            tier_done[task.tier] = cq + t.shard_ms(b, busiest, nprobe)

    def cold_done(pos: int) -> float:
        return cq + t.cold_ms(b, int(cold_probes[pos] + extra_cold[pos]), nprobe)

    events: queue.Queue = queue.Queue()
    snap = routed.snapshot
    cold_task = next((task for task in routed.tasks if task.is_cold), None)
    cold_work = [] if cold_task is None else [(p, cold_task.local[p]) for p in sorted(cold_task.local)]
    cold_work += [(p, []) for p in range(b) if expected[p] == {COLD} and (cold_task is None or p not in cold_task.local)]
    outstanding = 0
    for task in routed.tasks:
        if not task.is_cold:
            engine._pool(task.tier).submit(engine._run_shard, snap, task, routed, tier_done[task.tier], events)
            outstanding += len(task.local)
    if cold_work:
        engine._pool(COLD).submit(engine._run_cold, cold_work, routed, cold_done, events, COLD)
        outstanding += len(cold_work)

    # dispatcher: event-driven pops, partials buffered per request
    partials: list[dict[int, TopK]] = [{} for _ in range(b)]
    arrive_ms = np.full(b, cq)
    fallbacks = 0
    fallback_tier = -2
    while outstanding:
        ev = events.get()
        if ev.error is not None:
            task = next(x for x in routed.tasks if x.tier == ev.tier)
            log.warning("tier %d failed (%s); serving its clusters on the host", ev.tier, ev.error)
            outstanding -= len(task.local)
            work = []
            for pos in sorted(task.local):
                expected[pos].discard(task.tier)
                expected[pos].add(fallback_tier)
                extra_cold[pos] += len(task.global_ids[pos])
                work.append((pos, task.global_ids[pos]))
            fallbacks += 1
            engine._pool(COLD).submit(engine._run_cold, work, routed, cold_done, events, fallback_tier)
            outstanding += len(work)
            fallback_tier -= 1
            continue
        pos = pos_of[ev.request_id]
        if ev.tier in partials[pos]:
            raise AssertionError(f"request {ev.request_id} completed twice on tier {ev.tier}")
        partials[pos][ev.tier] = ev.partial
        arrive_ms[pos] = max(arrive_ms[pos], ev.completion_ms)
        outstanding -= 1

    results = []
    for pos, req in enumerate(reqs):
        if set(partials[pos]) != expected[pos]:
            raise AssertionError(f"request {req.request_id} is missing tier results")
        results.append(merge_rerank([partials[pos][k] for k in sorted(partials[pos])], req.k))
    for pos in range(b):
        if cold_probes[pos] + extra_cold[pos] > 0:
            tier_done[COLD] = max(tier_done.get(COLD, cq), cold_done(pos))
    batch_ms = max([cq, *tier_done.values(), *arrive_ms])
    release = arrive_ms.copy() if dispatcher_on else np.full(b, batch_ms)
    n_probes = np.array([len(s) for s in routed.shortlists], dtype=np.float64)
    hit = 1.0 - (cold_probes + extra_cold) / n_probes
    return BatchResult(tuple(results), release, tier_done, hit, float(batch_ms), snap.version, fallbacks)


# -- runtime statistics -------------------------------------------------------


@dataclass(frozen=True)
class WindowSummary:
    index: int
    n_requests: int
    mean_hitrate: float
    attainment: float
    counts: np.ndarray = field(repr=False)


class RuntimeStats:
    """Windowed hit-rate, SLO and per-cluster access counters.

    Counters reset under a lock when a window fills; a batch that straddles
    a boundary is split between the two windows.
    """

    def __init__(self, n_clusters: int, window: int = 2000):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.n_clusters = n_clusters
        self.window = window
        self._lock = threading.Lock()
        self.windows: list[WindowSummary] = []
        self._reset()

    def _reset(self):
        self._counts = np.zeros(self.n_clusters, dtype=np.int64)
        self._n = 0
        self._hit_sum = 0.0
        self._met = 0

    @property
    def current(self) -> tuple[int, float, float]:
        """(requests, mean hit rate, attainment) of the open window."""
        with self._lock:
            n = self._n
            return n, (self._hit_sum / n if n else 0.0), (self._met / n if n else 1.0)

    def current_counts(self) -> np.ndarray:
        with self._lock:
            return self._counts.copy()

    def record(self, shortlists: Sequence[np.ndarray], hit_rates, latencies_ms, slo_ms: float) -> list[WindowSummary]:
        """Add per-request outcomes; returns any windows closed by this call."""
        closed = []
        with self._lock:
            for sl, h, lat in zip(shortlists, hit_rates, latencies_ms):
                np.add.at(self._counts, np.asarray(sl, dtype=np.int64), 1)
                self._n += 1
                self._hit_sum += float(h)
                self._met += int(lat <= slo_ms)
                if self._n == self.window:
                    w = WindowSummary(len(self.windows), self._n, self._hit_sum / self._n, self._met / self._n, self._counts)
                    self.windows.append(w)
                    closed.append(w)
                    self._reset()
        return closed


def record_stats(stats: RuntimeStats, routed: RoutedBatch, result: BatchResult, latencies_ms, slo_ms: float) -> list[WindowSummary]:
    return stats.record(routed.shortlists, result.hit_rates, latencies_ms, slo_ms)


def check_drift(observed_eta: float, attainment: float, expected_eta: float, attainment_threshold: float = 0.9, eta_threshold: float = 0.05) -> bool:
    """Drift needs both a missed SLO and a hit rate off its expected value."""
    return attainment < attainment_threshold and abs(observed_eta - expected_eta) > eta_threshold


# -- adaptive re-partitioning -------------------------------------------------


@dataclass(frozen=True, eq=False)
class Planner:
    """Everything needed to rerun partitioning from fresh access counts."""

    slo: SloConfig
    llm: LlmModel
    latency: LatencyModel
    sigma2_max: float
    n_shards: int
    mem_kvcache_bytes: float
    bytes_scale: float = 1.0

    def plan(self, index: IvfIndex, counts: np.ndarray, nprobe: int) -> tuple[PartitionPlan, CoverageCurve, AccessProfile]:
        profile = AccessProfile(np.asarray(counts, dtype=np.int64), index.cluster_bytes(), nprobe, int(counts.sum()) // max(nprobe, 1))
        curve = coverage_curve(profile)
        mem = MemoryModel.from_curve(curve, self.mem_kvcache_bytes, self.bytes_scale)
        return partition(self.slo, mem, self.llm, self.latency, curve, self.sigma2_max), curve, profile


def adaptive_update(engine: Engine, planner: Planner, counts: np.ndarray, nprobe: int) -> Iterator[MapSnapshot]:
    """Replan from windowed counts and swap shards in one at a time.

    A generator: each step publishes a snapshot and yields it, so callers
    choose how steps interleave with traffic. The first step routes every
    shard cold while the new layout loads; each later step brings one shard
    back. On failure the old map is restored.
    """
    old = engine.snapshot
    try:
        plan, curve, profile = planner.plan(engine.index, counts, nprobe)
        split = split_index(engine.index, profile, plan, planner.n_shards)
    except Exception:
        log.exception("re-partitioning failed; keeping map version %d", old.version)
        raise
    eta = curve.eta_at(plan.rho)
    pending = set(range(split.shard_map.n_shards))
    yield engine.publish(split.shard_map, split.shards, pending, eta)
    for s in sorted(pending):
        pending.discard(s)
        yield engine.publish(split.shard_map, split.shards, set(pending), eta)
    engine.plan = plan


def run_update_in_background(
    engine: Engine,
    planner: Planner,
    counts: np.ndarray,
    nprobe: int,
    on_swap: Callable[[MapSnapshot], None] | None = None,
    retries: int = 3,
    backoff_s: float = 0.05,
) -> threading.Thread:
    """Run ``adaptive_update`` on a thread, calling ``on_swap`` after each step."""

    def work():
        for attempt in range(retries):
            try:
                for snap in adaptive_update(engine, planner, counts, nprobe):
                    if on_swap is not None:
                        on_swap(snap)
                return
            except Exception:
                time.sleep(backoff_s * (2**attempt))

    th = threading.Thread(target=work, name="adaptive-update", daemon=True)
    th.start()
    return th


# -- streaming driver ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StreamReport:
    latencies_ms: np.ndarray
    hit_rates: np.ndarray
    batch_sizes: np.ndarray
    windows: tuple
    drift_windows: tuple
    update_windows: tuple
    answered: int
    n_requests: int
    map_versions: np.ndarray


def run_stream(
    engine: Engine,
    queries: np.ndarray,
    arrivals_ms: np.ndarray,
    nprobe: int,
    k: int,
    planner: Planner | None = None,
    window: int = 2000,
    attainment_threshold: float = 0.9,
    eta_threshold: float = 0.05,
    max_batch: int | None = None,
    dispatcher_on: bool = True,
) -> StreamReport:
    """Serve a request stream on a virtual clock with drift-triggered updates.

    The host serves every waiting request as one batch whenever it is free.
    Update steps, once triggered, advance one per batch so traffic keeps
    flowing through partial swaps.
    """
    queries = np.asarray(queries, dtype=np.float32)
    arrivals_ms = np.asarray(arrivals_ms, dtype=np.float64)
    n = len(queries)
    stats = RuntimeStats(engine.index.n_clusters, window)
    latency = np.full(n, np.nan)
    hits = np.full(n, np.nan)
    versions = np.zeros(n, dtype=np.int64)
    sizes = []
    drift, updates = [], []
    steps: Iterator[MapSnapshot] | None = None
    clock = 0.0
    nxt = 0
    while nxt < n:
        clock = max(clock, arrivals_ms[nxt])
        end = int(np.searchsorted(arrivals_ms, clock, side="right"))
        if max_batch is not None:
            end = min(end, nxt + max_batch)
        batch = [RetrievalRequest(i, queries[i], nprobe, k, float(arrivals_ms[i])) for i in range(nxt, end)]
        routed = engine.route(batch)
        res = engine.execute(routed, dispatcher_on)
        lat = clock + res.release_ms - arrivals_ms[nxt:end]
        latency[nxt:end] = lat
        hits[nxt:end] = res.hit_rates
        versions[nxt:end] = res.map_version
        sizes.append(end - nxt)
        clock += res.batch_ms
        closed = stats.record(routed.shortlists, res.hit_rates, lat, engine.slo_search_ms)
        nxt = end
        if steps is not None:
            if next(steps, None) is None:
                steps = None
            continue
        for w in closed:
            if planner is not None and check_drift(w.mean_hitrate, w.attainment, engine.snapshot.expected_eta, attainment_threshold, eta_threshold):
                drift.append(w.index)
                updates.append(w.index)
                steps = adaptive_update(engine, planner, w.counts, nprobe)
                next(steps)
                break
    answered = int(np.sum(np.isfinite(latency)))
    return StreamReport(latency, hits, np.asarray(sizes), tuple(stats.windows), tuple(drift), tuple(updates), answered, n, versions)


# -- line-delimited JSON serving ------------------------------------------------


def serve_jsonl(engine: Engine, lines: Iterable[str], out: TextIO, default_nprobe: int = 16, default_k: int = 10) -> int:
    """Answer one JSON request per line; malformed lines get an error object."""
    served = 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        msg = None
        try:
            msg = json.loads(line)
            req = RetrievalRequest(
                int(msg["id"]), np.asarray(msg["query"], dtype=np.float32), int(msg.get("nprobe", default_nprobe)), int(msg.get("k", default_k))
            )
            res = engine.search([req])
            top = res.results[0]
            reply = {"id": req.request_id, "hits": [[v, d] for v, d in top.hits], "t_search_ms": float(res.release_ms[0])}
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            reply = {"id": msg.get("id") if isinstance(msg, dict) else None, "error": str(exc)}
        out.write(json.dumps(reply) + "\n")
        out.flush()
        served += 1
    return served
