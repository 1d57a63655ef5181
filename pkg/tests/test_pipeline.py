import io
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tieredrag.datagen import flipped_popularity, make_queries
from tieredrag.partitioner import LlmModel, PartitionPlan, SloConfig
from tieredrag.pipeline import (
    COLD,
    Engine,
    Planner,
    RetrievalRequest,
    RuntimeStats,
    StaleMapError,
    TimingModel,
    adaptive_update,
    check_drift,
    merge_rerank,
    record_stats,
    route_batch,
    run_stream,
    serve_jsonl,
)
from tieredrag.profiler import LatencyModel, PiecewiseLinear
from tieredrag.splitter import split_index
from tieredrag.vecstore import TopK, search, select_topk, shortlist_arrays

TIMING = TimingModel(LatencyModel(PiecewiseLinear.linear(1.0, 0.05), PiecewiseLinear.linear(20.0, 1.0)))


def plan_with(hot):
    return PartitionPlan(0.0, np.asarray(hot, dtype=np.int64), 1, 0.0, 0.0, 0.0, 0.0, 0, 0, False)


def requests(queries, nprobe, k):
    return [RetrievalRequest(i, q, nprobe, k) for i, q in enumerate(queries)]


def engine_for(index, hot, n_shards):
    return Engine(index, split_index(index, None, plan_with(hot), n_shards), TIMING)


# -- merge ------------------------------------------------------------------------------


def test_merge_single_partial_truncates():
    p = TopK(4, np.array([7, 3, 9], np.uint64), np.array([0.1, 0.2, 0.3]))
    m = merge_rerank([p], 2)
    assert m.ids.tolist() == [7, 3] and m.query_id == 4


def test_merge_disjoint_equals_sorted_concat():
    a = TopK(0, np.array([1, 2], np.uint64), np.array([0.5, 2.0]))
    b = TopK(0, np.array([3, 4], np.uint64), np.array([1.0, 1.5]))
    assert merge_rerank([a, b], 4).ids.tolist() == [1, 3, 4, 2]


@given(st.lists(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), max_size=12), min_size=1, max_size=4), st.integers(1, 20))
def test_merge_matches_sort_oracle(parts, k):
    partials, pool, next_id = [], [], 0
    for part in parts:
        ids = np.arange(next_id, next_id + len(part), dtype=np.uint64)
        next_id += len(part)
        d = np.array([a + b / 4 for a, b in part], dtype=np.float64)
        partials.append(select_topk(ids, d, 50))
        pool += list(zip(d.tolist(), ids.tolist()))
    want = sorted(pool)[:k]
    got = merge_rerank(partials, k)
    assert list(zip(got.distances.tolist(), got.ids.tolist())) == want


def test_merge_errors():
    with pytest.raises(ValueError):
        merge_rerank([], 3)
    a = TopK(0, np.array([1], np.uint64), np.array([0.5]))
    with pytest.raises(ValueError):
        merge_rerank([a, TopK(1, np.array([2], np.uint64), np.array([0.5]))], 3)


# -- routing ----------------------------------------------------------------------------


def test_route_all_cold(small_index, small_queries):
    eng = engine_for(small_index, [], 2)
    routed = eng.route(requests(small_queries[:5], 4, 5))
    assert [t.tier for t in routed.tasks] == [COLD]


def test_route_all_on_shard_zero(small_index, small_queries):
    reqs = requests(small_queries[:5], 4, 5)
    short, _ = shortlist_arrays(small_index, small_queries[:5], 4)
    eng = engine_for(small_index, np.unique(short), 1)
    routed = eng.route(reqs)
    assert [t.tier for t in routed.tasks] == [0]


@pytest.mark.parametrize("n_shards", [1, 2, 4])
def test_route_partitions_each_shortlist(small_index, small_queries, n_shards):
    eng = engine_for(small_index, list(range(0, small_index.n_clusters, 2)), n_shards)
    qs = small_queries[:40]
    routed = eng.route(requests(qs, 6, 5))
    short, _ = shortlist_arrays(small_index, qs, 6)
    for pos in range(len(qs)):
        got = Counter()
        probes = 0
        for task in routed.tasks:
            got.update(task.global_ids.get(pos, []))
            probes += task.probes(pos)
        assert got == Counter(short[pos].tolist())
        assert probes == 6


def test_route_rejects_mismatched_map(small_index, small_corpus, small_queries):
    from tieredrag.vecstore import train_ivf

    other = train_ivf(small_corpus.dataset, 16, seed=0)
    eng = engine_for(other, [1], 1)
    with pytest.raises(StaleMapError):
        route_batch(requests(small_queries[:2], 4, 3), eng.snapshot, small_index)
    with pytest.raises(ValueError):
        route_batch([], eng.snapshot, other)


# -- execution --------------------------------------------------------------------------


@pytest.mark.parametrize("n_shards", [1, 2, 4])
@pytest.mark.parametrize("dispatcher_on", [True, False])
def test_hybrid_equals_monolithic(small_index, small_queries, n_shards, dispatcher_on):
    qs = small_queries[:60]
    want = search(small_index, qs, 8, 10)
    with engine_for(small_index, list(range(1, small_index.n_clusters, 3)), n_shards) as eng:
        res = eng.search(requests(qs, 8, 10), dispatcher_on)
    assert all(g == w for g, w in zip(res.results, want))


def test_dispatcher_off_releases_together(small_index, small_queries):
    with engine_for(small_index, [0, 5, 9, 20], 2) as eng:
        res = eng.search(requests(small_queries[:20], 6, 5), dispatcher_on=False)
    assert np.all(res.release_ms == res.batch_ms)
    assert res.batch_ms == max(res.tier_done_ms.values())


def test_dispatcher_releases_hot_query_early(small_index, small_queries):
    qs = small_queries[:2]
    short, _ = shortlist_arrays(small_index, qs, 4)
    # query 0 probes only hot clusters; query 1 needs the host for some of its own
    hot = sorted(short[0].tolist())
    assert set(short[1].tolist()) - set(hot)
    with engine_for(small_index, hot, 1) as eng:
        on = eng.search(requests(qs, 4, 5), dispatcher_on=True)
        off = eng.search(requests(qs, 4, 5), dispatcher_on=False)
    assert on.hit_rates[0] == 1.0
    assert on.release_ms[0] < on.batch_ms
    assert np.all(on.release_ms <= off.release_ms)


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_dispatcher_dominance(small_index, small_queries, seed, nprobe, n_shards):
    rng = np.random.default_rng(seed)
    hot = rng.choice(small_index.n_clusters, size=rng.integers(0, small_index.n_clusters), replace=False)
    qs = small_queries[rng.choice(len(small_queries), size=16, replace=False)]
    with engine_for(small_index, hot, n_shards) as eng:
        routed = eng.route(requests(qs, nprobe, 5))
        on = eng.execute(routed, True)
        off = eng.execute(routed, False)
    assert np.all(on.release_ms <= off.release_ms)
    assert all(a == b for a, b in zip(on.results, off.results))


def test_failed_shard_falls_back_to_host(small_index, small_queries):
    qs = small_queries[:30]
    want = search(small_index, qs, 8, 10)
    with engine_for(small_index, list(range(0, small_index.n_clusters, 2)), 2) as eng:
        eng.failing.add(1)
        res = eng.search(requests(qs, 8, 10))
    assert res.fallbacks == 1
    assert all(g == w for g, w in zip(res.results, want))


def test_hit_rates_match_shortlists(small_index, small_queries):
    hot = set(range(0, small_index.n_clusters, 4))
    qs = small_queries[:25]
    short, _ = shortlist_arrays(small_index, qs, 8)
    with engine_for(small_index, sorted(hot), 2) as eng:
        res = eng.search(requests(qs, 8, 3))
    want = [np.mean([c in hot for c in row]) for row in short]
    np.testing.assert_allclose(res.hit_rates, want, rtol=0, atol=1e-15)


# -- runtime stats and drift --------------------------------------------------------------


def test_drift_examples():
    assert not check_drift(0.6, 1.0, 0.6)
    assert check_drift(0.3, 0.5, 0.6, 0.9, 0.1)
    assert not check_drift(0.58, 0.2, 0.6, 0.9, 0.1)
    assert not check_drift(0.1, 0.95, 0.6, 0.9, 0.1)


def test_window_counts_conserve_probes(small_index, small_queries):
    stats = RuntimeStats(small_index.n_clusters, window=50)
    with engine_for(small_index, [1, 2, 3], 1) as eng:
        for start in range(0, 200, 40):
            routed = eng.route(requests(small_queries[start : start + 40], 5, 3))
            res = eng.execute(routed)
            record_stats(stats, routed, res, res.release_ms, slo_ms=1e9)
    assert len(stats.windows) == 4
    for w in stats.windows:
        assert w.n_requests == 50 and w.counts.sum() == 50 * 5 and w.attainment == 1.0
    n, _, _ = stats.current
    assert n == 0


def test_stats_mean_and_attainment():
    stats = RuntimeStats(4, window=4)
    closed = stats.record([[0], [1], [2], [3]], [1.0, 0.5, 0.0, 0.5], [10, 20, 30, 40], slo_ms=25)
    (w,) = closed
    assert w.mean_hitrate == 0.5 and w.attainment == 0.5
    assert w.counts.tolist() == [1, 1, 1, 1]
    with pytest.raises(ValueError):
        RuntimeStats(4, window=0)


# -- adaptive update ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def adaptive_setup(desk):
    lat = desk.latency
    slo = SloConfig(90.0, 150.0)
    full = float(desk.curve.hot_bytes[-1])
    planner = Planner(slo, LlmModel(700.0), lat, desk.sigma.sigma2_max, 2, full / 0.4)
    plan, curve, profile = planner.plan(desk.index, desk.profile.counts, desk.nprobe)
    split = split_index(desk.index, profile, plan, 2)
    return planner, plan, curve, split


def test_no_drift_keeps_map(desk, adaptive_setup):
    planner, plan, curve, split = adaptive_setup
    qs, _ = make_queries(desk.corpus, 1200, seed=21)
    arrivals = np.cumsum(np.random.default_rng(2).exponential(4.0, len(qs)))
    with Engine(desk.index, split, TimingModel(desk.latency), curve.eta_at(plan.rho), slo_search_ms=1e9) as eng:
        rep = run_stream(eng, qs, arrivals, desk.nprobe, 10, planner=planner, window=400)
        assert eng.snapshot.version == 0
    assert rep.update_windows == () and rep.answered == rep.n_requests
    assert np.all(rep.map_versions == 0)


def test_flip_update_matches_reprofiled_top(desk, adaptive_setup):
    planner, plan, curve, split = adaptive_setup
    flipped, _ = make_queries(desk.corpus, 1500, seed=22, popularity=flipped_popularity(desk.corpus.n_modes))
    short, _ = shortlist_arrays(desk.index, flipped, desk.nprobe)
    counts = np.bincount(short.ravel(), minlength=desk.index.n_clusters)
    with Engine(desk.index, split, TimingModel(desk.latency), curve.eta_at(plan.rho)) as eng:
        steps = list(adaptive_update(eng, planner, counts, desk.nprobe))
        new_plan = eng.plan
        final = eng.snapshot
    assert len(steps) == final.shard_map.n_shards + 1 and final.swapping == frozenset()
    # oracle: the hot set is the top of the new counters, ties by cluster id
    order = np.lexsort((np.arange(len(counts)), -counts))
    assert sorted(final.shard_map.hot) == sorted(order[: new_plan.n_hot].tolist())


def test_queries_during_swap_match_monolithic(desk, adaptive_setup):
    planner, plan, curve, split = adaptive_setup
    flipped, _ = make_queries(desk.corpus, 300, seed=23, popularity=flipped_popularity(desk.corpus.n_modes))
    short, _ = shortlist_arrays(desk.index, flipped, desk.nprobe)
    counts = np.bincount(short.ravel(), minlength=desk.index.n_clusters)
    want = search(desk.index, flipped, desk.nprobe, 10)
    with Engine(desk.index, split, TimingModel(desk.latency), curve.eta_at(plan.rho)) as eng:
        for step, snap in enumerate(adaptive_update(eng, planner, counts, desk.nprobe)):
            if step == 0:
                assert snap.swapping == frozenset(range(snap.shard_map.n_shards))
            res = eng.search(requests(flipped, desk.nprobe, 10))
            assert res.map_version == snap.version
            assert all(g == w for g, w in zip(res.results, want))
            if snap.swapping:
                routed = eng.route(requests(flipped[:50], desk.nprobe, 10))
                assert all(t.is_cold or t.tier not in snap.swapping for t in routed.tasks)


def test_update_failure_keeps_old_map(desk, adaptive_setup):
    planner, plan, curve, split = adaptive_setup
    with Engine(desk.index, split, TimingModel(desk.latency)) as eng:
        with pytest.raises(ValueError):
            list(adaptive_update(eng, planner, np.zeros(desk.index.n_clusters, dtype=np.int64), desk.nprobe))
        assert eng.snapshot.version == 0


# -- JSON lines ------------------------------------------------------------------------------


def test_serve_jsonl(small_index, small_queries):
    lines = [
        json.dumps({"id": 7, "query": small_queries[0].tolist(), "nprobe": 4, "k": 3}),
        "",
        "not json",
        json.dumps({"id": 8, "query": [1.0]}),
    ]
    out = io.StringIO()
    with engine_for(small_index, [0, 1, 2], 1) as eng:
        assert serve_jsonl(eng, lines, out) == 3
    replies = [json.loads(line) for line in out.getvalue().splitlines()]
    (want,) = search(small_index, small_queries[:1], 4, 3)
    assert replies[0]["id"] == 7 and replies[0]["hits"] == [list(h) for h in want.hits]
    assert replies[0]["t_search_ms"] > 0
    assert "error" in replies[1] and replies[1]["id"] is None
    assert "error" in replies[2] and replies[2]["id"] == 8
