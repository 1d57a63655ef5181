import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tieredrag.profiler import LatencyModel, PiecewiseLinear
from tieredrag.simulator import (
    ModeTiming,
    Scenario,
    attainment_from_csv,
    batch_timing,
    default_scenario,
    generate_workload,
    max_compliant_lambda,
    mode_timing,
    queuing_factor,
    records_csv,
    report,
    simulate,
    sweep,
    sweep_csv,
)


@pytest.fixture(scope="module")
def base(desk):
    return default_scenario(desk.curve, desk.sigma.sigma2_max, desk.latency).replace(duration_s=20.0)


def batches(m):
    """(start, end, first arrival) per batch, ordered by start."""
    r = m.records
    starts = np.unique(r["_batch_start_ms"])
    out = []
    for s in starts:
        sel = r["_batch_start_ms"] == s
        out.append((s, s + r["search_ms"][sel].max(), r["arrival_ms"][sel].min()))
    return out


# -- workload ---------------------------------------------------------------------------


def test_workload_count_and_repeatability():
    w = generate_workload(10.0, 100.0, seed=3)
    assert abs(len(w) - 1000) <= 3 * math.sqrt(1000)
    again = generate_workload(10.0, 100.0, seed=3)
    assert np.array_equal(w.arrivals_ms, again.arrivals_ms) and np.array_equal(w.uniforms, again.uniforms)
    assert not np.array_equal(w.arrivals_ms, generate_workload(10.0, 100.0, seed=4).arrivals_ms)


def test_workload_mean_gap():
    w = generate_workload(50.0, 400.0, seed=1)
    gaps = np.diff(np.r_[0.0, w.arrivals_ms])
    assert abs(gaps.mean() - 20.0) <= 3 * gaps.std(ddof=1) / math.sqrt(len(gaps))
    assert np.all(w.arrivals_ms < 400_000) and np.all(np.diff(w.arrivals_ms) > 0)


# -- single runs -------------------------------------------------------------------------


def test_light_traffic_is_queue_free(base):
    m = simulate(base.replace(lambda_rps=2.0, duration_s=200.0))
    r = m.records
    assert np.mean(r["batch_size"] == 1) > 0.95
    lat = base.latency
    lo = lat.t_cq(1) + base.llm.prefill_ms
    hi = lat.t_cq(1) + lat.t_lut(1) + base.llm.prefill_ms
    assert lo <= m.p90_ttft <= hi + 1e-3
    single = r["batch_size"] == 1
    assert np.median(r["queue_ms"][single]) == 0.0


def test_overload_is_flagged(base):
    m = simulate(base.replace(lambda_rps=900.0, mode="cpu_only"))
    assert m.saturated
    e2e = m.records["e2e_ms"]
    n = len(e2e)
    assert e2e[4 * n // 5 :].mean() > 2 * e2e[: n // 5].mean()


def test_ttft_identity_and_conservation(base):
    for mode in ("cpu_only", "tiered", "all_gpu", "dedicated_gpu"):
        m = simulate(base.replace(lambda_rps=250.0, mode=mode))
        r = m.records
        assert r["request_id"].tolist() == list(range(len(generate_workload(250.0, base.duration_s, base.seed))))
        np.testing.assert_allclose(r["ttft_ms"], r["queue_ms"] + r["search_ms"] + r["prefill_ms"], rtol=0, atol=1e-9)
        assert np.all(r["e2e_ms"] >= r["ttft_ms"])
        assert np.all(r["queue_ms"] >= 0) and np.all(r["search_ms"] > 0)


def test_server_idle_only_when_queue_empty(base):
    m = simulate(base.replace(lambda_rps=300.0))
    prev_end = -1.0
    for start, end, first in batches(m):
        # a batch starts when the server frees up, or on an arrival into an idle server
        assert start == pytest.approx(max(prev_end, first), abs=1e-9)
        prev_end = end


def test_littles_law(base):
    m = simulate(base.replace(lambda_rps=300.0, duration_s=60.0, mode="cpu_only"))
    arr, soj = m.records["arrival_ms"], m.records["ttft_ms"]
    horizon = arr.max()
    ts = np.linspace(0.2 * horizon, 0.8 * horizon, 3000)
    in_system = np.mean([np.sum((arr <= t) & (arr + soj > t)) for t in ts])
    rate = len(arr) / horizon
    mid = (arr > 0.2 * horizon) & (arr < 0.8 * horizon)
    assert in_system == pytest.approx(rate * soj[mid].mean(), rel=0.10)


def test_queuing_factor_at_max_stable_cpu(base):
    lambdas = list(range(50, 651, 50))
    res = sweep(base, lambdas, ["cpu_only"])
    lam = max_compliant_lambda(res, "cpu_only")
    assert lam > 0
    m = simulate(base.replace(lambda_rps=lam, mode="cpu_only", duration_s=60.0))
    assert 0.8 <= queuing_factor(m) <= 1.1


def test_dispatcher_off_equalizes_batch(base):
    m = simulate(base.replace(lambda_rps=300.0, dispatcher_on=False))
    r = m.records
    for s in np.unique(r["_batch_start_ms"])[:200]:
        sel = r["_batch_start_ms"] == s
        assert len(np.unique(r["search_ms"][sel])) == 1


def test_batch_timing_dominance():
    lat = LatencyModel(PiecewiseLinear.linear(2.0, 0.1), PiecewiseLinear.linear(30.0, 1.0))
    timing = ModeTiming(500.0, 0.3, 1.0, True)
    rng = np.random.default_rng(0)
    for _ in range(50):
        hit = rng.random(rng.integers(1, 40))
        end_on, on = batch_timing(lat, len(hit), hit, timing, 10.0, True)
        end_off, off = batch_timing(lat, len(hit), hit, timing, 10.0, False)
        assert end_on == end_off and np.all(on <= off) and on.max() == end_on


def test_mode_memory_effects(base):
    cpu = mode_timing(base.replace(mode="cpu_only"))
    gpu = mode_timing(base.replace(mode="all_gpu"))
    ded = mode_timing(base.replace(mode="dedicated_gpu"))
    tiered = mode_timing(base.replace(mode="tiered"))
    assert cpu.mu_llm == base.llm.mu_llm0
    assert gpu.mu_llm == pytest.approx(base.llm.mu_llm0 * 0.6)
    assert ded.mu_llm == pytest.approx(base.llm.mu_llm0 * 3 / 4)
    assert gpu.mu_llm < tiered.mu_llm < cpu.mu_llm


def test_hitrate_pool_replay(base):
    pool = (0.2, 0.4, 0.9)
    m = simulate(base.replace(lambda_rps=100.0, hitrate_pool=pool))
    assert set(np.unique(m.records["hit_rate"]).tolist()) <= set(pool)


# -- determinism and files ----------------------------------------------------------------


def test_simulation_is_byte_reproducible(base):
    a = records_csv(simulate(base.replace(lambda_rps=350.0)))
    b = records_csv(simulate(base.replace(lambda_rps=350.0)))
    assert a == b
    assert a.splitlines()[0] == "request_id,arrival_ms,queue_ms,search_ms,prefill_ms,ttft_ms,e2e_ms,batch_size,hit_rate"


def test_scenario_json_round_trip(base):
    s = base.replace(rho=0.25, max_batch=64, hitrate_pool=(0.1, 0.5))
    back = Scenario.from_json(s.to_json())
    assert back.to_json() == s.to_json()
    with pytest.raises(ValueError):
        Scenario.from_dict({**s.to_dict(), "version": 99})


def test_scenario_validation(base):
    with pytest.raises(ValueError):
        base.replace(mode="gpu_only")
    with pytest.raises(ValueError):
        base.replace(lambda_rps=0.0)
    with pytest.raises(ValueError):
        base.replace(dedicated_gpus=4)


def test_tiered_not_worse_than_cpu(base):
    res = sweep(base, [100.0, 200.0, 300.0, 400.0, 500.0], ["cpu_only", "tiered"])
    by = {(m.mode, m.scenario.lambda_rps): m.attainment for m in res}
    for lam in (100.0, 200.0, 300.0, 400.0, 500.0):
        assert by["tiered", lam] >= by["cpu_only", lam]
    assert max_compliant_lambda(res, "tiered") >= max_compliant_lambda(res, "cpu_only")


def test_report_files(base, tmp_path):
    res = sweep(base.replace(duration_s=5.0), [100.0, 200.0], ["cpu_only", "tiered"])
    written = report(res, tmp_path)
    names = sorted(p.name for p in written)
    assert names == sorted(
        ["sweep.csv", "attainment.png", "ttft_breakdown.png"] + [f"requests_{m}_{l:g}.csv" for m in ("cpu_only", "tiered") for l in (100.0, 200.0)]
    )
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "lambda_rps,mode,p50_ttft,p90_ttft,p95_ttft,slo_attainment,mean_batch,saturated"
    assert len(rows) == 1 + 4
    for m in res:
        text = (tmp_path / f"requests_{m.mode}_{m.scenario.lambda_rps:g}.csv").read_text()
        assert attainment_from_csv(text, base.slo.slo_total_ms) == pytest.approx(m.attainment, abs=0)
    assert sweep_csv(res) == (tmp_path / "sweep.csv").read_text()


def test_empty_report_writes_nothing(tmp_path):
    with pytest.raises(ValueError):
        report([], tmp_path / "out")
    assert not (tmp_path / "out").exists()
    with pytest.raises(ValueError):
        sweep(None, [])


@given(st.integers(0, 2**31 - 1), st.sampled_from(["cpu_only", "tiered"]), st.integers(1, 64))
@settings(max_examples=15, deadline=None)
def test_property_conservation(base, seed, mode, cap):
    m = simulate(base.replace(lambda_rps=400.0, duration_s=3.0, seed=seed, mode=mode, max_batch=cap))
    r = m.records
    assert len(np.unique(r["request_id"])) == m.n_requests
    assert r["batch_size"].max() <= cap
    np.testing.assert_allclose(r["ttft_ms"], r["queue_ms"] + r["search_ms"] + r["prefill_ms"], rtol=0, atol=1e-9)
