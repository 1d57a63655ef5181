"""Discrete-event simulation of retrieval plus generation under Poisson load.

The retrieval server takes every waiting request as one batch whenever it
is free. Batch time follows the fitted stage curves, with the scan share
that stays on the host set by the worst hit rate in the batch. Released
requests enter the LLM, which admits them at its throughput and adds a fixed
prefill. The clock counts integer microseconds.
"""

from __future__ import annotations

import csv
import dataclasses
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .hitrate import beta_from_moments, variance_at
from .partitioner import InfeasiblePlan, LlmModel, MemoryModel, SloConfig, llm_throughput_at, partition
from .profiler import CoverageCurve, LatencyModel

SCENARIO_VERSION = 1
MODES = ("cpu_only", "all_gpu", "dedicated_gpu", "tiered")
TICKS_PER_MS = 1000

RECORD_FIELDS = ("request_id", "arrival_ms", "queue_ms", "search_ms", "prefill_ms", "ttft_ms", "e2e_ms", "batch_size", "hit_rate")
SWEEP_FIELDS = ("lambda_rps", "mode", "p50_ttft", "p90_ttft", "p95_ttft", "slo_attainment", "mean_batch", "saturated")


@dataclass(frozen=True, eq=False)
class Scenario:
    lambda_rps: float
    duration_s: float
    seed: int
    slo: SloConfig
    latency: LatencyModel
    llm: LlmModel
    curve: CoverageCurve
    sigma2_max: float
    mem_kvcache_bytes: float
    bytes_scale: float = 1.0
    mode: str = "tiered"
    rho: float | None = None
    gpu_speedup: float = 10.0
    n_gpus: int = 4
    dedicated_gpus: int = 1
    max_batch: int | None = None
    dispatcher_on: bool = True
    hitrate_pool: tuple | None = None

    def __post_init__(self):
        if not self.lambda_rps > 0:
            raise ValueError("lambda_rps must be positive")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0 <= self.dedicated_gpus < self.n_gpus:
            raise ValueError("dedicated_gpus must leave at least one accelerator for the LLM")
        if self.max_batch is not None and self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    @property
    def memory(self) -> MemoryModel:
        return MemoryModel.from_curve(self.curve, self.mem_kvcache_bytes, self.bytes_scale)

    def planned_rho(self) -> float:
        """Cache fraction for tiered mode: the explicit one or the planner's."""
        if self.rho is not None:
            return float(self.rho)
        return partition(self.slo, self.memory, self.llm, self.latency, self.curve, self.sigma2_max).rho

    def to_dict(self) -> dict:
        return {
            "version": SCENARIO_VERSION,
            "lambda_rps": self.lambda_rps,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "slo": dataclasses.asdict(self.slo),
            "latency": self.latency.to_dict(),
            "llm": self.llm.to_dict(),
            "curve": self.curve.to_dict(),
            "sigma2_max": self.sigma2_max,
            "mem_kvcache_bytes": self.mem_kvcache_bytes,
            "bytes_scale": self.bytes_scale,
            "mode": self.mode,
            "rho": self.rho,
            "gpu_speedup": self.gpu_speedup,
            "n_gpus": self.n_gpus,
            "dedicated_gpus": self.dedicated_gpus,
            "max_batch": self.max_batch,
            "dispatcher_on": self.dispatcher_on,
            "hitrate_pool": None if self.hitrate_pool is None else list(self.hitrate_pool),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("version") != SCENARIO_VERSION:
            raise ValueError(f"unsupported scenario version {d.get('version')!r}")
        pool = d.get("hitrate_pool")
        return cls(
            lambda_rps=float(d["lambda_rps"]),
            duration_s=float(d["duration_s"]),
            seed=int(d["seed"]),
            slo=SloConfig(**d["slo"]),
            latency=LatencyModel.from_dict(d["latency"]),
            llm=LlmModel.from_dict(d["llm"]),
            curve=CoverageCurve.from_dict(d["curve"]),
            sigma2_max=float(d["sigma2_max"]),
            mem_kvcache_bytes=float(d["mem_kvcache_bytes"]),
            bytes_scale=float(d["bytes_scale"]),
            mode=d["mode"],
            rho=None if d["rho"] is None else float(d["rho"]),
            gpu_speedup=float(d["gpu_speedup"]),
            n_gpus=int(d["n_gpus"]),
            dedicated_gpus=int(d["dedicated_gpus"]),
            max_batch=None if d["max_batch"] is None else int(d["max_batch"]),
            dispatcher_on=bool(d["dispatcher_on"]),
            hitrate_pool=None if pool is None else tuple(float(x) for x in pool),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Workload:
    arrivals_ms: np.ndarray
    uniforms: np.ndarray

    def __len__(self) -> int:
        return len(self.arrivals_ms)


def generate_workload(lambda_rps: float, duration_s: float, seed: int) -> Workload:
    """Poisson arrivals over ``duration_s`` plus one uniform per request.

    The uniforms are mapped to hit rates later, so every mode replays the
    same trace.
    """
    if not lambda_rps > 0:
        raise ValueError("lambda_rps must be positive")
    rng = np.random.default_rng(seed)
    horizon = duration_s * 1000.0
    mean_gap = 1000.0 / lambda_rps
    gaps = rng.exponential(mean_gap, size=int(lambda_rps * duration_s + 10 * math.sqrt(lambda_rps * duration_s) + 10))
    times = np.cumsum(gaps)
    while times[-1] < horizon:
        more = np.cumsum(rng.exponential(mean_gap, size=len(gaps))) + times[-1]
        times = np.concatenate([times, more])
    arrivals = times[times < horizon]
    uniforms = np.random.default_rng([seed, 1]).random(len(arrivals))
    return Workload(arrivals, uniforms)


def hit_rates_for(scenario: Scenario, uniforms: np.ndarray, rho: float) -> np.ndarray:
    """Per-request hit rates: Beta quantiles, or an empirical pool when given."""
    if scenario.hitrate_pool is not None:
        pool = np.sort(np.asarray(scenario.hitrate_pool, dtype=np.float64))
        return pool[np.minimum((uniforms * len(pool)).astype(np.int64), len(pool) - 1)]
    mean = scenario.curve.eta_at(rho)
    var = variance_at(mean, scenario.sigma2_max) if 0.0 < mean < 1.0 else 0.0
    if var <= 0.0:
        return np.full(len(uniforms), mean)
    var = min(var, 0.999 * mean * (1.0 - mean))
    params = beta_from_moments(mean, var)
    return special.betaincinv(params.alpha, params.beta, uniforms)


@dataclass(frozen=True)
class ModeTiming:
    mu_llm: float
    rho: float
    search_divisor: float
    tiered: bool


def mode_timing(scenario: Scenario) -> ModeTiming:
    """LLM throughput and search treatment for the scenario's mode."""
    llm, mem = scenario.llm, scenario.memory
    mode = scenario.mode
    if mode == "cpu_only":
        return ModeTiming(llm.mu_llm0, 0.0, 1.0, False)
    if mode == "all_gpu":
        try:
            mu = llm_throughput_at(mem, llm, 1.0)
        except InfeasiblePlan:
            mu = 0.0
        return ModeTiming(mu, 1.0, scenario.gpu_speedup, False)
    if mode == "dedicated_gpu":
        share = (scenario.n_gpus - scenario.dedicated_gpus) / scenario.n_gpus
        return ModeTiming(llm.mu_llm0 * share, 1.0, scenario.gpu_speedup, False)
    rho = scenario.planned_rho()
    return ModeTiming(llm_throughput_at(mem, llm, rho), rho, 1.0, True)


@dataclass(frozen=True, eq=False)
class SimMetrics:
    scenario: Scenario
    mode: str
    rho: float
    mu_llm: float
    records: dict = field(repr=False)
    saturated: bool = False

    @property
    def n_requests(self) -> int:
        return len(self.records["request_id"])

    def _pct(self, col: str, q: float) -> float:
        return float(np.percentile(self.records[col], q)) if self.n_requests else float("nan")

    @property
    def p50_ttft(self) -> float:
        return self._pct("ttft_ms", 50)

    @property
    def p90_ttft(self) -> float:
        return self._pct("ttft_ms", 90)

    @property
    def p95_ttft(self) -> float:
        return self._pct("ttft_ms", 95)

    @property
    def p50_e2e(self) -> float:
        return self._pct("e2e_ms", 50)

    @property
    def p90_e2e(self) -> float:
        return self._pct("e2e_ms", 90)

    @property
    def p95_e2e(self) -> float:
        return self._pct("e2e_ms", 95)

    @property
    def search_latency_ms(self) -> np.ndarray:
        """Retrieval queueing plus search, the part the search SLO covers."""
        return self.records["retrieval_queue_ms"] + self.records["search_ms"]

    @property
    def p90_search(self) -> float:
        return float(np.percentile(self.search_latency_ms, 90)) if self.n_requests else float("nan")

    @property
    def attainment(self) -> float:
        if not self.n_requests:
            return float("nan")
        return float(np.mean(self.records["ttft_ms"] <= self.scenario.slo.slo_total_ms))

    @property
    def mean_batch(self) -> float:
        sizes = self.records["batch_size"]
        return float(np.mean(sizes)) if len(sizes) else float("nan")

    @property
    def batch_starts_ms(self) -> np.ndarray:
        return self.records["_batch_start_ms"]

    def summary(self) -> dict:
        return {
            "lambda_rps": self.scenario.lambda_rps,
            "mode": self.mode,
            "p50_ttft": self.p50_ttft,
            "p90_ttft": self.p90_ttft,
            "p95_ttft": self.p95_ttft,
            "slo_attainment": self.attainment,
            "mean_batch": self.mean_batch,
            "saturated": self.saturated,
        }


def batch_timing(latency: LatencyModel, b: int, hit: np.ndarray, timing: ModeTiming, speedup: float, dispatcher_on: bool) -> tuple[int, np.ndarray]:
    """Batch duration and per-request search completion, both in ticks.

    Tiered: the cached share runs on the accelerator, the rest on the host;
    a request finishes when both of its parts do. Other modes run the whole
    batch in one place.
    """
    t_cq, t_lut = latency.t_cq(b), latency.t_lut(b)
    if timing.tiered:
        cold = t_cq + (1.0 - hit) * t_lut
        gpu = np.where(hit > 0, t_cq + hit.max() * t_lut / speedup, t_cq)
        done = np.maximum(cold, gpu)
    else:
        done = np.full(b, (t_cq + t_lut) / timing.search_divisor)
    ticks = np.ceil(done * TICKS_PER_MS - 1e-6).astype(np.int64)
    end = int(ticks.max())
    if not dispatcher_on:
        ticks = np.full(b, end, dtype=np.int64)
    return end, ticks


_ARRIVAL, _SEARCH_DONE = 0, 1


def simulate(scenario: Scenario, workload: Workload | None = None) -> SimMetrics:
    """Run the event loop for one scenario; deterministic per seed."""
    wl = workload if workload is not None else generate_workload(scenario.lambda_rps, scenario.duration_s, scenario.seed)
    timing = mode_timing(scenario)
    n = len(wl)
    hits = hit_rates_for(scenario, wl.uniforms, timing.rho) if timing.tiered else np.full(n, 1.0 if timing.rho >= 1 else 0.0)
    arrive = np.round(wl.arrivals_ms * TICKS_PER_MS).astype(np.int64)

    start = np.zeros(n, dtype=np.int64)
    release = np.zeros(n, dtype=np.int64)
    bsize = np.zeros(n, dtype=np.int64)
    batch_min_hit = np.zeros(n)

    events: list[tuple[int, int, int]] = [(int(arrive[i]), _ARRIVAL, i) for i in range(n)]
    heapq.heapify(events)
    waiting: list[int] = []
    busy = False

    def start_batch(now: int):
        nonlocal busy, waiting
        take = len(waiting) if scenario.max_batch is None else min(len(waiting), scenario.max_batch)
        batch, waiting = waiting[:take], waiting[take:]
        ids = np.asarray(batch)
        end, ticks = batch_timing(scenario.latency, len(batch), hits[ids], timing, scenario.gpu_speedup, scenario.dispatcher_on)
        start[ids] = now
        release[ids] = now + ticks
        bsize[ids] = len(batch)
        batch_min_hit[ids] = hits[ids].min()
        busy = True
        heapq.heappush(events, (now + end, _SEARCH_DONE, -1))

    while events:
        now, kind, i = heapq.heappop(events)
        if kind == _ARRIVAL:
            waiting.append(i)
            if not busy:
                start_batch(now)
        else:
            busy = False
            if waiting:
                start_batch(now)

    # LLM admits requests in release order at most mu per second
    prefill = int(round(scenario.llm.prefill_ms * TICKS_PER_MS))
    decode = int(round(scenario.llm.decode_ms * TICKS_PER_MS))
    llm_start = np.zeros(n, dtype=np.int64)
    if timing.mu_llm > 0:
        gap = int(round(TICKS_PER_MS * 1000.0 / timing.mu_llm))
        free = -(10**18)
        for i in np.lexsort((np.arange(n), release)):
            llm_start[i] = max(int(release[i]), free)
            free = llm_start[i] + gap
    else:
        llm_start[:] = np.iinfo(np.int64).max // 4

    ms = 1.0 / TICKS_PER_MS
    retrieval_queue = (start - arrive) * ms
    search = (release - start) * ms
    llm_queue = (llm_start - release) * ms
    queue_ms = retrieval_queue + llm_queue
    prefill_ms = np.full(n, prefill * ms)
    ttft = (llm_start + prefill - arrive) * ms
    records = {
        "request_id": np.arange(n, dtype=np.int64),
        "arrival_ms": arrive * ms,
        "queue_ms": queue_ms,
        "search_ms": search,
        "prefill_ms": prefill_ms,
        "ttft_ms": ttft,
        "e2e_ms": ttft + decode * ms,
        "batch_size": bsize,
        "hit_rate": hits,
        "retrieval_queue_ms": retrieval_queue,
        "llm_queue_ms": llm_queue,
        "batch_min_hit": batch_min_hit,
        "_batch_start_ms": start * ms,
    }
    return SimMetrics(scenario, scenario.mode, timing.rho, timing.mu_llm, records, _diverging(scenario, timing, queue_ms))


def _diverging(scenario: Scenario, timing: ModeTiming, queue_ms: np.ndarray) -> bool:
    """Offered load beyond a stage's capacity, or queueing that keeps growing."""
    if timing.mu_llm <= 0 or scenario.lambda_rps >= timing.mu_llm:
        return True
    n = len(queue_ms)
    if n < 10:
        return False
    early = float(np.mean(queue_ms[n // 5 : 2 * n // 5]))
    late = float(np.mean(queue_ms[4 * n // 5 :]))
    return late > 2.0 * early + scenario.slo.slo_total_ms


# -- sweeps ---------------------------------------------------------------------


def sweep(scenario: Scenario, lambdas: Sequence[float], modes: Sequence[str] = MODES) -> list[SimMetrics]:
    """Run every (mode, lambda) pair; each lambda uses its own seeded trace shared across modes."""
    if len(lambdas) == 0:
        raise ValueError("empty sweep")
    out = []
    rho = scenario.planned_rho() if "tiered" in modes else None
    for lam in lambdas:
        base = scenario.replace(lambda_rps=float(lam))
        wl = generate_workload(base.lambda_rps, base.duration_s, base.seed)
        for mode in modes:
            out.append(simulate(base.replace(mode=mode, rho=rho if mode == "tiered" else base.rho), wl))
    return out


def queuing_factor(m: SimMetrics) -> float:
    """Measured epsilon: oldest request's retrieval wait per batch over batch service time.

    The search budget reserves ``epsilon`` batch times for the wait of the
    longest-waiting request, so the per-batch maximum is compared, not the
    per-request mean (which sits near half a batch under Poisson arrivals).
    """
    if not m.n_requests:
        raise ValueError("no requests simulated")
    _, batch = np.unique(m.records["_batch_start_ms"], return_inverse=True)
    n = int(batch.max()) + 1
    wait = np.zeros(n)
    service = np.zeros(n)
    np.maximum.at(wait, batch, m.records["retrieval_queue_ms"])
    np.maximum.at(service, batch, m.records["search_ms"])
    return float(wait.mean() / service.mean())


def compliant(m: SimMetrics) -> bool:
    return (not m.saturated) and m.p90_ttft <= m.scenario.slo.slo_total_ms


def max_compliant_lambda(results: Sequence[SimMetrics], mode: str) -> float:
    """Largest swept lambda below which every point of ``mode`` meets the TTFT SLO."""
    best = 0.0
    for m in sorted((r for r in results if r.mode == mode), key=lambda r: r.scenario.lambda_rps):
        if not compliant(m):
            break
        best = m.scenario.lambda_rps
    return best


# -- default desk scenario --------------------------------------------------------


def default_scenario(curve: CoverageCurve, sigma2_max: float, latency: LatencyModel, seed: int = 0) -> Scenario:
    """The calibrated desk scenario around a profiled index.

    Caching the whole index takes 40% of the KV budget, and the base LLM
    throughput sits well above what the host alone can search within the
    SLO, so the search tier is the bottleneck without a cache.
    """
    full_bytes = float(curve.hot_bytes[-1])
    return Scenario(
        lambda_rps=100.0,
        duration_s=60.0,
        seed=seed,
        slo=SloConfig(slo_search_ms=150.0, slo_llm_ms=150.0, epsilon=1.0, delta=0.005),
        latency=latency,
        llm=LlmModel(mu_llm0=700.0, prefill_ms=80.0, decode_ms_per_token=20.0, output_tokens=64),
        curve=curve,
        sigma2_max=sigma2_max,
        mem_kvcache_bytes=full_bytes / 0.4,
        bytes_scale=1.0,
    )


# -- reports ----------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"


def records_csv(metrics: SimMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    cols = [metrics.records[f] for f in RECORD_FIELDS]
    for row in zip(*cols):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def sweep_csv(results: Sequence[SimMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for m in results:
        s = m.summary()
        w.writerow([_fmt(float(s["lambda_rps"])), s["mode"], *(_fmt(s[f]) for f in SWEEP_FIELDS[2:])])
    return buf.getvalue()


def _plot_attainment(results: Sequence[SimMetrics], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for mode in sorted({m.mode for m in results}):
        pts = sorted((m.scenario.lambda_rps, m.attainment) for m in results if m.mode == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("arrival rate (req/s)")
    ax.set_ylabel("TTFT SLO attainment")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _plot_breakdown(results: Sequence[SimMetrics], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lam = min(m.scenario.lambda_rps for m in results)
    rows = sorted((m for m in results if m.scenario.lambda_rps == lam), key=lambda m: m.mode)
    labels = [m.mode for m in rows]
    parts = [
        ("queueing", [float(np.mean(m.records["queue_ms"])) for m in rows]),
        ("vector search", [float(np.mean(m.records["search_ms"])) for m in rows]),
        ("LLM prefill", [float(np.mean(m.records["prefill_ms"])) for m in rows]),
    ]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    bottom = np.zeros(len(rows))
    for name, vals in parts:
        ax.bar(labels, vals, bottom=bottom, label=name)
        bottom += np.asarray(vals)
    ax.set_ylabel(f"mean TTFT (ms) at {lam:g} req/s")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def report(results: Sequence[SimMetrics], out_dir, per_request: bool = True) -> list[Path]:
    """Write sweep CSV, per-request CSVs and the two plots into ``out_dir``.

    Everything is rendered in memory first, so a failure leaves no partial
    set of files behind.
    """
    if len(results) == 0:
        raise ValueError("empty sweep: nothing to report")
    out = Path(out_dir)
    files: dict[str, bytes] = {"sweep.csv": sweep_csv(results).encode()}
    if per_request:
        for m in results:
            files[f"requests_{m.mode}_{m.scenario.lambda_rps:g}.csv"] = records_csv(m).encode()
    tmp = out / ".report-tmp"
    tmp.mkdir(parents=True, exist_ok=True)
    try:
        _plot_attainment(results, tmp / "attainment.png")
        _plot_breakdown(results, tmp / "ttft_breakdown.png")
        for name in ("attainment.png", "ttft_breakdown.png"):
            files[name] = (tmp / name).read_bytes()
    finally:
        for p in tmp.iterdir():
            p.unlink()
        tmp.rmdir()
    written = []
    for name in sorted(files):
        path = out / name
        path.write_bytes(files[name])
        written.append(path)
    return written


def attainment_from_csv(text: str, slo_total_ms: float) -> float:
    """Recompute attainment from a per-request CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    return float(np.mean([float(r["ttft_ms"]) <= slo_total_ms for r in rows]))

