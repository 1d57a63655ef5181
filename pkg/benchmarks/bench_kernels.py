"""Compare the compiled distance kernels with the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Each case is timed with
``timeit`` (best of several repeats) and checked for bit-identical output
before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tieredrag import kernels


def cases(rng, n_rows: int, dim: int, n_queries: int, n_centroids: int):
    rows = rng.normal(size=(n_rows, dim)).astype(np.float32)
    codes = rng.integers(0, 256, size=(n_rows, dim), dtype=np.uint8)
    scale = rng.uniform(0.01, 0.1, size=dim)
    offset = rng.normal(size=dim)
    q = rng.normal(size=dim)
    queries = rng.normal(size=(n_queries, dim))
    cents = rng.normal(size=(n_centroids, dim)).astype(np.float32)
    return {
        "scan_l2": lambda b: kernels.row_distances(rows, q, backend=b),
        "scan_ip": lambda b: kernels.row_distances(rows, q, inner_product=True, backend=b),
        "scan_l2_sq8": lambda b: kernels.row_distances(codes, q, scale=scale, offset=offset, backend=b),
        "coarse_l2": lambda b: kernels.pairwise_distances(queries, cents, backend=b),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--queries", type=int, default=64)
    ap.add_argument("--centroids", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if "cython" not in kernels.BACKENDS:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, fn in cases(rng, args.rows, args.dim, args.queries, args.centroids).items():
        same = np.array_equal(fn("numpy"), fn("cython"))
        t = {}
        for b in ("numpy", "cython"):
            number = 5
            t[b] = min(timeit.repeat(lambda: fn(b), number=number, repeat=args.repeat)) / number * 1e3
        print(f"{name:<14}{t['numpy']:>12.3f}{t['cython']:>12.3f}{t['numpy'] / t['cython']:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
