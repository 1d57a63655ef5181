"""Command-line driver: one subcommand per pipeline stage.

Stage outputs land in an output directory (``--out-dir``, else
``$TIEREDRAG_OUT``, else ``./tieredrag-out``) under fixed names, and each
stage reads its inputs from there unless pointed elsewhere. Every JSON
artifact records the digests of its inputs; stale chains are refused.
Failures print one JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .artifacts import ArtifactError, StaleArtifactError
from .datagen import make_corpus, make_queries
from .hitrate import QuadratureError
from .partitioner import InfeasiblePlan, LlmModel, MemoryModel, PartitionDiverged, PartitionPlan, SloConfig, partition
from .pipeline import Engine, TimingModel, serve_jsonl
from .profiler import (
    AccessProfile,
    CoverageCurve,
    LatencyModel,
    SigmaMax,
    coverage_curve,
    modeled_latency,
    profile_access,
    profile_latency,
    profile_sigma_max,
    samples_to_csv,
)
from .simulator import MODES, Scenario, default_scenario, max_compliant_lambda, report, sweep, sweep_csv
from .splitter import IndexSplit, ShardMap, cold_index, load_shard, serialize_shard, split_index
from .vecstore import FormatError, VectorDataset, load_index, save_index, train_ivf

log = logging.getLogger("tieredrag")

OUT_ENV = "TIEREDRAG_OUT"
DEFAULT_OUT = "tieredrag-out"

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_STALE = 4
EXIT_INFEASIBLE = 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR, kind: str = "error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, EXIT_USAGE, "usage")


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _input(args, name: str, default: str) -> Path:
    given = getattr(args, name, None)
    return Path(given) if given else _out_dir(args) / default


def _save_npy(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, np.ascontiguousarray(arr), allow_pickle=False)
    os.replace(tmp, path)


def _load_dataset(manifest: Path) -> tuple[dict, VectorDataset, np.ndarray]:
    doc = artifacts.read_manifest(manifest, "dataset")
    vectors = np.load(artifacts.resolve(manifest, doc, "outputs", "vectors"), allow_pickle=False)
    queries = np.load(artifacts.resolve(manifest, doc, "outputs", "queries"), allow_pickle=False)
    return doc, VectorDataset.from_vectors(vectors), queries


def _load_index(manifest: Path):
    doc = artifacts.read_manifest(manifest, "index")
    return doc, load_index(artifacts.resolve(manifest, doc, "outputs", "index"))


def _load_profile(manifest: Path) -> tuple[dict, CoverageCurve, float, LatencyModel]:
    doc = artifacts.read_manifest(manifest, "profile")
    p = doc["payload"]
    return doc, CoverageCurve.from_dict(p["curve"]), SigmaMax.from_dict(p["sigma"]).sigma2_max, LatencyModel.from_dict(p["latency_model"])


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    out = _out_dir(args)
    rng_seed = args.seed
    if args.from_npy:
        vectors = np.load(args.from_npy, allow_pickle=False).astype(np.float32)
        if vectors.ndim != 2:
            raise CliError(f"{args.from_npy}: expected a 2-d array", EXIT_ERROR, "format")
        rng = np.random.default_rng([rng_seed, 2])
        pick = rng.integers(len(vectors), size=args.n_queries)
        queries = (vectors[pick] + rng.normal(scale=args.noise * 0.1, size=(args.n_queries, vectors.shape[1]))).astype(np.float32)
        params = {"source": "ingest", "n_queries": args.n_queries, "seed": rng_seed}
    else:
        corpus = make_corpus(args.n_vectors, args.dim, args.n_modes, seed=rng_seed, separation=args.separation, noise=args.noise)
        vectors = corpus.dataset.vectors
        queries, _ = make_queries(corpus, args.n_queries, zipf_s=args.zipf_s, seed=rng_seed + 1)
        params = {
            "source": "synthetic",
            "n_vectors": args.n_vectors,
            "dim": args.dim,
            "n_modes": args.n_modes,
            "separation": args.separation,
            "noise": args.noise,
            "n_queries": args.n_queries,
            "zipf_s": args.zipf_s,
            "seed": rng_seed,
        }
    _save_npy(out / "vectors.npy", vectors)
    _save_npy(out / "queries.npy", queries)
    manifest = out / "dataset.json"
    artifacts.write_manifest(manifest, "dataset", params, outputs={"vectors": out / "vectors.npy", "queries": out / "queries.npy"})
    return {"manifest": str(manifest), "n_vectors": int(len(vectors)), "n_queries": int(len(queries))}


def cmd_build_index(args) -> dict:
    out = _out_dir(args)
    ds_path = _input(args, "dataset", "dataset.json")
    _, dataset, _ = _load_dataset(ds_path)
    index = train_ivf(dataset, args.n_clusters, args.quantization, seed=args.seed, metric=args.metric)
    save_index(index, out / "index.tivf.tmp")
    os.replace(out / "index.tivf.tmp", out / "index.tivf")
    params = {"n_clusters": args.n_clusters, "metric": args.metric, "quantization": args.quantization, "seed": args.seed}
    manifest = out / "index.json"
    artifacts.write_manifest(manifest, "index", params, inputs={"dataset": ds_path}, outputs={"index": out / "index.tivf"})
    return {"manifest": str(manifest), "n_clusters": index.n_clusters, "ntotal": index.ntotal}


def cmd_profile(args) -> dict:
    out = _out_dir(args)
    ds_path = _input(args, "dataset", "dataset.json")
    idx_path = _input(args, "index", "index.json")
    _, _, queries = _load_dataset(ds_path)
    _, index = _load_index(idx_path)
    access = profile_access(index, queries, args.nprobe)
    curve = coverage_curve(access)
    sigma = profile_sigma_max(index, queries, args.nprobe, curve)
    sizes = args.batch_size or [1, 2, 4, 8, 16, 32, 64, 128, 256]
    if args.latency == "measured":
        samples = profile_latency(index, queries, sizes, args.nprobe)
    else:
        samples = modeled_latency(index, queries, sizes, args.nprobe)
    model = LatencyModel.fit(samples)
    csv_path = out / "latency.csv"
    artifacts.write_bytes_atomic(csv_path, samples_to_csv(samples).encode())
    payload = {
        "nprobe": args.nprobe,
        "latency_source": args.latency,
        "access": access.to_dict(),
        "curve": curve.to_dict(),
        "sigma": sigma.to_dict(),
        "samples": [[s.batch_size, s.t_cq_ms, s.t_lut_ms] for s in samples],
        "latency_model": model.to_dict(),
        "top20_share": access.top_share(0.2),
    }
    manifest = out / "profile.json"
    artifacts.write_manifest(manifest, "profile", payload, inputs={"dataset": ds_path, "index": idx_path}, outputs={"latency_csv": csv_path})
    return {"manifest": str(manifest), "sigma2_max": sigma.sigma2_max, "top20_share": access.top_share(0.2)}


def _scenario_params(args, curve: CoverageCurve) -> dict:
    kv = args.kv_cache_bytes if args.kv_cache_bytes else float(curve.hot_bytes[-1]) / args.index_kv_fraction
    return {
        "slo": {"slo_search_ms": args.slo_search_ms, "slo_llm_ms": args.slo_llm_ms, "epsilon": args.epsilon, "delta": args.delta},
        "llm": LlmModel(args.mu_llm0, args.prefill_ms, args.decode_ms_per_token, args.output_tokens).to_dict(),
        "mem_kvcache_bytes": kv,
        "bytes_scale": args.bytes_scale,
    }


def cmd_plan(args) -> dict:
    out = _out_dir(args)
    prof_path = _input(args, "profile", "profile.json")
    _, curve, sigma2_max, latency = _load_profile(prof_path)
    params = _scenario_params(args, curve)
    slo = SloConfig(**params["slo"])
    llm = LlmModel.from_dict(params["llm"])
    mem = MemoryModel.from_curve(curve, params["mem_kvcache_bytes"], params["bytes_scale"])
    plan = partition(slo, mem, llm, latency, curve, sigma2_max)
    manifest = out / "plan.json"
    artifacts.write_manifest(manifest, "plan", {"plan": plan.to_dict(), "scenario": params}, inputs={"profile": prof_path})
    return {"manifest": str(manifest), "rho": plan.rho, "n_hot": plan.n_hot, "predicted_mu": plan.predicted_mu, "saturated": plan.saturated}


def cmd_split(args) -> dict:
    out = _out_dir(args)
    idx_path = _input(args, "index", "index.json")
    prof_path = _input(args, "profile", "profile.json")
    plan_path = _input(args, "plan", "plan.json")
    _, index = _load_index(idx_path)
    prof_doc = artifacts.read_manifest(prof_path, "profile")
    plan_doc = artifacts.read_manifest(plan_path, "plan")
    plan = PartitionPlan.from_dict(plan_doc["payload"]["plan"])
    split = split_index(index, AccessProfile.from_dict(prof_doc["payload"]["access"]), plan, args.n_shards)
    shard_dir = out / "shards"
    shard_dir.mkdir(parents=True, exist_ok=True)
    for stale in sorted(shard_dir.glob("shard-*.tshd")):
        stale.unlink()
    outputs = {}
    for shard in split.shards:
        path = shard_dir / f"shard-{shard.shard_id:03d}.tshd"
        artifacts.write_bytes_atomic(path, serialize_shard(shard))
        outputs[f"shard-{shard.shard_id:03d}"] = path
    payload = {"plan": plan.to_dict(), "shard_map": split.shard_map.to_dict()}
    manifest = out / "split.json"
    artifacts.write_manifest(manifest, "split", payload, inputs={"index": idx_path, "plan": plan_path, "profile": prof_path}, outputs=outputs)
    return {"manifest": str(manifest), "n_shards": args.n_shards, "shard_bytes": split.shard_map.shard_bytes.tolist()}


def load_engine(split_path: Path) -> Engine:
    """Rebuild an in-process engine from a split manifest and its chain."""
    doc = artifacts.read_manifest(split_path, "split")
    _, index = _load_index(artifacts.resolve(split_path, doc, "inputs", "index"))
    _, curve, _, latency = _load_profile(artifacts.resolve(split_path, doc, "inputs", "profile"))
    shard_map = ShardMap.from_dict(doc["payload"]["shard_map"])
    shards = tuple(load_shard(artifacts.resolve(split_path, doc, "outputs", role).read_bytes()) for role in sorted(doc["outputs"]))
    plan = PartitionPlan.from_dict(doc["payload"]["plan"])
    split = IndexSplit(shard_map, shards, cold_index(index, shard_map.hot_ids()))
    engine = Engine(index, split, TimingModel(latency), expected_eta=curve.eta_at(plan.rho))
    engine.plan = plan
    return engine


def cmd_serve(args) -> dict:
    split_path = _input(args, "split", "split.json")
    engine = load_engine(split_path)
    source = open(args.input) if args.input else sys.stdin
    try:
        with engine:
            served = serve_jsonl(engine, source, sys.stdout, args.nprobe, args.k)
    finally:
        if source is not sys.stdin:
            source.close()
    return {"served": served}


def _lambdas(args) -> list[float]:
    if args.lambda_rps:
        return sorted(set(float(x) for x in args.lambda_rps))
    n = int(round((args.lambda_max_rps - args.lambda_min_rps) / args.lambda_step_rps))
    return [float(args.lambda_min_rps + i * args.lambda_step_rps) for i in range(n + 1)]


def _scenario_from(plan_doc: dict, prof_doc: dict, args) -> Scenario:
    p = prof_doc["payload"]
    curve = CoverageCurve.from_dict(p["curve"])
    base = default_scenario(curve, SigmaMax.from_dict(p["sigma"]).sigma2_max, LatencyModel.from_dict(p["latency_model"]), seed=args.seed)
    s = plan_doc["payload"]["scenario"]
    return base.replace(
        duration_s=args.duration_s,
        slo=SloConfig(**s["slo"]),
        llm=LlmModel.from_dict(s["llm"]),
        mem_kvcache_bytes=float(s["mem_kvcache_bytes"]),
        bytes_scale=float(s["bytes_scale"]),
        rho=float(plan_doc["payload"]["plan"]["rho"]),
        gpu_speedup=args.gpu_speedup,
        n_gpus=args.n_gpus,
        dedicated_gpus=args.dedicated_gpus,
        max_batch=args.max_batch,
        dispatcher_on=not args.no_dispatcher,
    )


def cmd_simulate(args) -> dict:
    out = _out_dir(args)
    prof_path = _input(args, "profile", "profile.json")
    plan_path = _input(args, "plan", "plan.json")
    prof_doc = artifacts.read_manifest(prof_path, "profile")
    plan_doc = artifacts.read_manifest(plan_path, "plan")
    scenario = _scenario_from(plan_doc, prof_doc, args)
    modes = args.mode or list(MODES)
    lambdas = _lambdas(args)
    results = sweep(scenario, lambdas, modes)
    csv_path = out / "sweep.csv"
    artifacts.write_bytes_atomic(csv_path, sweep_csv(results).encode())
    payload = {
        "scenario": scenario.to_dict(),
        "lambdas": lambdas,
        "modes": modes,
        "points": [m.summary() for m in results],
        "max_compliant_lambda": {mode: max_compliant_lambda(results, mode) for mode in modes},
    }
    manifest = out / "sweep.json"
    artifacts.write_manifest(manifest, "sweep", payload, inputs={"plan": plan_path, "profile": prof_path}, outputs={"sweep_csv": csv_path})
    return {"manifest": str(manifest), "points": len(results), "max_compliant_lambda": payload["max_compliant_lambda"]}


def cmd_report(args) -> dict:
    out = _out_dir(args)
    sweep_path = _input(args, "sweep", "sweep.json")
    doc = artifacts.read_manifest(sweep_path, "sweep")
    p = doc["payload"]
    # the sweep is a pure function of its scenario and seed, so rerunning it
    # reproduces the per-request records the manifest does not carry
    results = sweep(Scenario.from_dict(p["scenario"]), p["lambdas"], p["modes"])
    if [m.summary() for m in results] != p["points"]:
        raise StaleArtifactError(f"{sweep_path}: rerun does not reproduce the recorded sweep")
    report_dir = out / "report"
    files = report(results, report_dir, per_request=args.per_request)
    manifest = report_dir / "report.json"
    artifacts.write_manifest(manifest, "report", {"files": [f.name for f in files]}, inputs={"sweep": sweep_path}, outputs={f.name: f for f in files})
    return {"manifest": str(manifest), "files": [str(f) for f in files]}


# -- argument parsing -----------------------------------------------------------


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slo-search-ms", type=float, default=150.0, help="search-stage SLO (ms)")
    p.add_argument("--slo-llm-ms", type=float, default=150.0, help="generation-stage SLO (ms)")
    p.add_argument("--epsilon", type=float, default=1.0, help="queuing factor: batch times reserved for queueing")
    p.add_argument("--delta", type=float, default=0.005, help="bisection tolerance on the cached fraction")
    p.add_argument("--mu-llm0", type=float, default=700.0, help="LLM throughput with the whole KV budget (req/s)")
    p.add_argument("--prefill-ms", type=float, default=80.0)
    p.add_argument("--decode-ms-per-token", type=float, default=20.0)
    p.add_argument("--output-tokens", type=int, default=64)
    p.add_argument("--kv-cache-bytes", type=float, default=None, help="KV-cache budget; overrides --index-kv-fraction")
    p.add_argument("--index-kv-fraction", type=float, default=0.4, help="share of the KV budget the full index would take")
    p.add_argument("--bytes-scale", type=float, default=1.0, help="multiplier from desk index bytes to modeled bytes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tieredrag", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.set_defaults(fn=fn)
        return p

    p = command("gen-data", cmd_gen_data, "synthesize a Gaussian-mixture corpus and Zipf calibration queries, or ingest vectors")
    p.add_argument("--n-vectors", type=int, default=50_000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n-modes", type=int, default=64)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--n-queries", type=int, default=2000)
    p.add_argument("--zipf-s", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-npy", default=None, help="ingest an (n, dim) .npy array instead of synthesizing")

    p = command("build-index", cmd_build_index, "train an IVF index over the dataset")
    p.add_argument("--dataset", default=None, help="dataset manifest")
    p.add_argument("--n-clusters", type=int, default=256)
    p.add_argument("--metric", choices=["l2", "inner_product"], default="l2")
    p.add_argument("--quantization", choices=["none", "scalar8"], default="none")
    p.add_argument("--seed", type=int, default=0)

    p = command("profile", cmd_profile, "profile access skew, hit-rate variance and batch latency")
    p.add_argument("--dataset", default=None)
    p.add_argument("--index", default=None, help="index manifest")
    p.add_argument("--nprobe", type=int, default=16)
    p.add_argument("--latency", choices=["modeled", "measured"], default="modeled", help="modeled is deterministic; measured times the host")
    p.add_argument("--batch-size", type=int, action="append", help="batch size to profile (repeatable)")

    p = command("plan", cmd_plan, "choose the cached fraction with latency-bounded partitioning")
    p.add_argument("--profile", default=None)
    _scenario_flags(p)

    p = command("split", cmd_split, "write hot-cluster shards and the shard map")
    p.add_argument("--index", default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--n-shards", type=int, default=2)

    p = command("serve", cmd_serve, "answer JSON-lines queries from stdin with the hybrid engine")
    p.add_argument("--split", default=None, help="split manifest")
    p.add_argument("--input", default=None, help="read requests from a file instead of stdin")
    p.add_argument("--nprobe", type=int, default=16)
    p.add_argument("--k", type=int, default=10)

    p = command("simulate", cmd_simulate, "sweep arrival rates through the serving simulator")
    p.add_argument("--profile", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--mode", action="append", choices=MODES, help="mode to simulate (repeatable; default all)")
    p.add_argument("--lambda-rps", type=float, action="append", help="arrival rate to simulate (repeatable)")
    p.add_argument("--lambda-min-rps", type=float, default=50.0)
    p.add_argument("--lambda-max-rps", type=float, default=600.0)
    p.add_argument("--lambda-step-rps", type=float, default=50.0)
    p.add_argument("--duration-s", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gpu-speedup", type=float, default=10.0)
    p.add_argument("--n-gpus", type=int, default=4)
    p.add_argument("--dedicated-gpus", type=int, default=1)
    p.add_argument("--max-batch", type=int, default=None)
    p.add_argument("--no-dispatcher", action="store_true", help="release each batch at its slowest request")

    p = command("report", cmd_report, "render sweep CSVs and plots")
    p.add_argument("--sweep", default=None, help="sweep manifest")
    p.add_argument("--per-request", action="store_true", help="also write one per-request CSV per sweep point")
    return parser


_ERROR_CODES = (
    (StaleArtifactError, EXIT_STALE, "stale_artifact"),
    (ArtifactError, EXIT_MISSING, "artifact"),
    (FileNotFoundError, EXIT_MISSING, "missing_input"),
    (FormatError, EXIT_STALE, "format"),
    (InfeasiblePlan, EXIT_INFEASIBLE, "infeasible_plan"),
    (PartitionDiverged, EXIT_INFEASIBLE, "partition_diverged"),
    (QuadratureError, EXIT_ERROR, "quadrature"),
    (KeyError, EXIT_ERROR, "key"),
    (ValueError, EXIT_ERROR, "value"),
)


def _fail(command: str | None, kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "command": command, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr)
        summary = args.fn(args)
    except CliError as exc:
        return _fail(command, exc.kind, str(exc), exc.code)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except tuple(t for t, _, _ in _ERROR_CODES) as exc:
        for etype, code, kind in _ERROR_CODES:
            if isinstance(exc, etype):
                return _fail(command, kind, str(exc), code)
        raise
    if command != "serve":
        sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    else:
        sys.stderr.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
