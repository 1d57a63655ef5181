"""Latency-bounded partitioning of the index between the fast and host tiers.

A bisection over the cached fraction ``rho``: caching more clusters cuts
search latency but shrinks the LLM's KV cache and so its throughput, which
in turn sets the batch size the search must handle within its budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .hitrate import hitrate_to_coverage, min_hitrate_at
from .profiler import CoverageCurve, LatencyModel


class InfeasiblePlan(ValueError):
    """Raised when the index portion required does not fit beside the LLM."""


class PartitionDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SloConfig:
    slo_search_ms: float
    slo_llm_ms: float = 0.0
    epsilon: float = 1.0
    delta: float = 0.005

    def __post_init__(self):
        if self.slo_search_ms <= 0:
            raise ValueError("slo_search_ms must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def slo_total_ms(self) -> float:
        return self.slo_search_ms + self.slo_llm_ms


@dataclass(frozen=True)
class MemoryModel:
    """KV-cache budget and the byte cost of caching a fraction of the index.

    ``index_bytes_at`` is usually ``curve.bytes_at`` scaled by
    ``bytes_scale`` (desk-scale indexes stand in for much larger ones).
    """

    mem_kvcache_bytes: float
    index_bytes_at: Callable[[float], float]
    mem_param_bytes: float = 0.0

    @classmethod
    def from_curve(cls, curve: CoverageCurve, mem_kvcache_bytes: float, bytes_scale: float = 1.0, mem_param_bytes: float = 0.0):
        return cls(mem_kvcache_bytes, lambda rho: curve.bytes_at(rho) * bytes_scale, mem_param_bytes)


@dataclass(frozen=True)
class LlmModel:
    mu_llm0: float
    prefill_ms: float = 100.0
    decode_ms_per_token: float = 0.0
    output_tokens: int = 0

    def __post_init__(self):
        if self.mu_llm0 <= 0:
            raise ValueError("mu_llm0 must be positive")

    @property
    def decode_ms(self) -> float:
        return self.decode_ms_per_token * self.output_tokens

    def to_dict(self) -> dict:
        return {
            "mu_llm0": self.mu_llm0,
            "prefill_ms": self.prefill_ms,
            "decode_ms_per_token": self.decode_ms_per_token,
            "output_tokens": self.output_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LlmModel":
        return cls(float(d["mu_llm0"]), float(d["prefill_ms"]), float(d["decode_ms_per_token"]), int(d["output_tokens"]))


def latency_bound(slo: SloConfig) -> float:
    """Per-batch search budget, reserving ``epsilon`` batch times for queueing."""
    return slo.slo_search_ms / (1.0 + slo.epsilon)


def llm_throughput_at(mem: MemoryModel, llm: LlmModel, rho: float) -> float:
    """LLM throughput (req/s) scaled linearly by the KV cache left after caching ``rho``."""
    used = mem.index_bytes_at(rho)
    if used > mem.mem_kvcache_bytes:
        raise InfeasiblePlan(f"index portion {used:.4g} B exceeds KV budget {mem.mem_kvcache_bytes:.4g} B at rho={rho:.4f}")
    return min(llm.mu_llm0, (mem.mem_kvcache_bytes - used) / mem.mem_kvcache_bytes * llm.mu_llm0)


class BranchResult(NamedTuple):
    batch_size: int
    eta_required: float
    rho: float
    saturated: bool


class Inference(NamedTuple):
    rho: float
    saturated: bool
    up: BranchResult
    down: BranchResult | None

    @property
    def chosen(self) -> BranchResult:
        if self.down is not None and self.down.rho < self.up.rho:
            return self.down
        return self.up


def _branch(batch: int, bound_ms: float, latency: LatencyModel, curve: CoverageCurve, sigma2_max: float) -> BranchResult:
    t_cq, t_lut = latency.t_cq(batch), latency.t_lut(batch)
    total = t_cq + t_lut
    if not (math.isfinite(total) and t_lut > 0):
        raise ValueError(f"latency model gives unusable values at batch {batch}: cq={t_cq}, lut={t_lut}")
    eta = (total - bound_ms) / t_lut
    if eta > 1.0:
        return BranchResult(batch, eta, 1.0, True)
    choice = hitrate_to_coverage(curve, sigma2_max, batch, min(max(eta, 0.0), 1.0))
    return BranchResult(batch, eta, choice.rho, choice.saturated)


def infer_partition(
    tau_s_ms: float, mu_rps: float, latency: LatencyModel, curve: CoverageCurve, sigma2_max: float
) -> Inference:
    """Coverage needed so a batch of ``mu * tau_s`` queries finishes in time.

    Rounding the batch up asks for the full budget ``tau_s``; rounding down
    asks for the throughput-preserving bound ``B / mu``. The cheaper of the
    two is returned.
    """
    if mu_rps <= 0 or tau_s_ms <= 0:
        raise ValueError("throughput and latency bound must be positive")
    expected = tau_s_ms * mu_rps / 1000.0
    b_up = max(1, math.ceil(expected - 1e-12))
    up = _branch(b_up, tau_s_ms, latency, curve, sigma2_max)
    b_down = math.floor(expected + 1e-12)
    down = None
    if b_down >= 1:
        down = _branch(b_down, b_down / mu_rps * 1000.0, latency, curve, sigma2_max)
    result = Inference(0.0, False, up, down)
    best = result.chosen
    return result._replace(rho=best.rho, saturated=best.saturated)


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    rho: float
    hot_cluster_ids: np.ndarray
    predicted_batch: int
    predicted_tau_s_ms: float
    tau_budget_ms: float
    predicted_mu: float
    predicted_eta_min: float
    hot_bytes: int
    iterations: int
    saturated: bool
    trace: tuple = field(default=(), repr=False)

    @property
    def n_hot(self) -> int:
        return len(self.hot_cluster_ids)

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "hot_cluster_ids": [int(c) for c in self.hot_cluster_ids],
            "predicted_batch": self.predicted_batch,
            "predicted_tau_s_ms": self.predicted_tau_s_ms,
            "tau_budget_ms": self.tau_budget_ms,
            "predicted_mu": self.predicted_mu,
            "predicted_eta_min": self.predicted_eta_min,
            "hot_bytes": self.hot_bytes,
            "iterations": self.iterations,
            "saturated": self.saturated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(
            float(d["rho"]),
            np.asarray(d["hot_cluster_ids"], dtype=np.int64),
            int(d["predicted_batch"]),
            float(d["predicted_tau_s_ms"]),
            float(d["tau_budget_ms"]),
            float(d["predicted_mu"]),
            float(d["predicted_eta_min"]),
            int(d["hot_bytes"]),
            int(d["iterations"]),
            bool(d["saturated"]),
        )


def hybrid_search_ms(latency: LatencyModel, batch: int, eta_min: float) -> float:
    """Batch latency with the cached share of the scan hidden on the fast tier."""
    return latency.t_cq(batch) + (1.0 - eta_min) * latency.t_lut(batch)


def _settle(m_lo, m_hi, tau_s, mem, llm, latency, curve, sigma2_max) -> tuple[int, Inference]:
    """Smallest whole-cluster count in [m_lo, m_hi] whose own throughput it can serve."""
    for m in range(m_lo, m_hi + 1):
        try:
            mu = llm_throughput_at(mem, llm, float(curve.rho[m]))
        except InfeasiblePlan:
            break
        inf = infer_partition(tau_s, mu, latency, curve, sigma2_max)
        if inf.rho <= curve.rho[m] or m == m_hi:
            return m, inf
    mu = llm_throughput_at(mem, llm, float(curve.rho[m_hi]))
    return m_hi, infer_partition(tau_s, mu, latency, curve, sigma2_max)


def partition(
    slo: SloConfig,
    mem: MemoryModel,
    llm: LlmModel,
    latency: LatencyModel,
    curve: CoverageCurve,
    sigma2_max: float,
    max_iterations: int = 64,
) -> PartitionPlan:
    """Bisect on the cached fraction until the interval is narrower than ``delta``.

    Each step prices the midpoint's memory into LLM throughput and asks
    ``infer_partition`` what coverage that throughput needs. The required
    coverage falls as the cached fraction grows, so the fixed point lies
    between the midpoint and the answer; both bounds move toward it and
    never cross. The upper bound always satisfies its own requirement, and
    the plan is the first whole-cluster point of the final bracket that does.
    """
    tau_s = latency_bound(slo)
    lo, hi = 0.0, 1.0
    trace = []
    widths = []
    it = 0
    while hi - lo > slo.delta:
        it += 1
        if it > max_iterations:
            raise PartitionDiverged(f"no fixed point after {max_iterations} iterations")
        mid = 0.5 * (lo + hi)
        try:
            mu = llm_throughput_at(mem, llm, mid)
        except InfeasiblePlan:
            # the midpoint does not fit beside the LLM: look lower
            hi = mid
            trace.append((mid, None, None))
            continue
        if mu <= 0:
            hi = mid
            trace.append((mid, mu, None))
            continue
        rho = infer_partition(tau_s, mu, latency, curve, sigma2_max).rho
        trace.append((mid, mu, rho))
        if rho > mid:
            lo, hi = mid, min(hi, rho)
        else:
            lo, hi = max(lo, rho), mid
        widths.append(hi - lo)
        if len(widths) >= 4 and widths[-1] >= widths[-4]:
            raise PartitionDiverged("search interval stopped shrinking over 4 iterations")
    n_hot, final = _settle(max(0, curve.n_hot(lo) - 1), curve.n_hot(hi), tau_s, mem, llm, latency, curve, sigma2_max)
    rho = float(curve.rho[n_hot])
    mu = llm_throughput_at(mem, llm, rho)
    chosen = final.chosen
    eta_min = min_hitrate_at(float(curve.mean_hitrate[n_hot]), sigma2_max, chosen.batch_size)
    return PartitionPlan(
        rho=rho,
        hot_cluster_ids=curve.hot_set(rho),
        predicted_batch=chosen.batch_size,
        predicted_tau_s_ms=hybrid_search_ms(latency, chosen.batch_size, eta_min),
        tau_budget_ms=tau_s,
        predicted_mu=mu,
        predicted_eta_min=eta_min,
        hot_bytes=int(mem.index_bytes_at(rho)),
        iterations=it,
        saturated=bool(final.saturated and n_hot == curve.n_clusters),
        trace=tuple(trace),
    )
