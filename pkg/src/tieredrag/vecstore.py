"""In-memory IVF index: k-means training, coarse quantization, cluster scans.

Distances are always "smaller is closer": squared L2, or the negated inner
product for ``Metric.INNER_PRODUCT``. Ties are broken by ascending vector id
(scan results) or ascending cluster id (shortlists), which makes every
ordering total and every search reproducible.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import kernels


class Metric(str, Enum):
    L2 = "l2"
    INNER_PRODUCT = "inner_product"


class Quantization(str, Enum):
    NONE = "none"
    SCALAR8 = "scalar8"


class FormatError(ValueError):
    """Raised when a binary index or shard file cannot be decoded."""


_METRIC_CODES = {Metric.L2: 0, Metric.INNER_PRODUCT: 1}
_QUANT_CODES = {Quantization.NONE: 0, Quantization.SCALAR8: 1}


def _finite_2d(name: str, values, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[1]}, index expects {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class VectorDataset:
    vectors: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if vectors.ndim != 2 or vectors.shape[1] < 1:
            raise ValueError("vectors must be an (n, dim) array with dim >= 1")
        if ids.shape != (vectors.shape[0],):
            raise ValueError("ids must have one entry per vector")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("vector ids must be unique")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_vectors(cls, vectors) -> "VectorDataset":
        vectors = np.asarray(vectors)
        return cls(vectors, np.arange(len(vectors), dtype=np.uint64))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ClusterShortlist:
    query_id: int
    cluster_ids: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.cluster_ids)


@dataclass(frozen=True)
class TopK:
    query_id: int
    ids: np.ndarray
    distances: np.ndarray

    @property
    def hits(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TopK):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.distances, other.distances)
        )

    __hash__ = None  # type: ignore[assignment]


def select_topk(ids: np.ndarray, distances: np.ndarray, k: int, query_id: int = 0) -> TopK:
    """Smallest ``k`` entries ordered by (distance, id)."""
    ids = np.asarray(ids, dtype=np.uint64)
    distances = np.asarray(distances, dtype=np.float64)
    order = np.lexsort((ids, distances))[:k]
    return TopK(query_id, ids[order], distances[order])


@dataclass(frozen=True, eq=False)
class IvfIndex:
    """Centroids plus one inverted list per cluster.

    ``list_data[c]`` holds float32 rows, or uint8 codes when quantized with
    scalar8; codes decode as ``offset + scale * code`` per dimension.
    """

    metric: Metric
    quantization: Quantization
    centroids: np.ndarray
    list_ids: tuple
    list_data: tuple
    sq_scale: np.ndarray | None = None
    sq_offset: np.ndarray | None = None

    def __post_init__(self):
        for arr in (self.centroids, self.sq_scale, self.sq_offset, *self.list_ids, *self.list_data):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def ntotal(self) -> int:
        return int(sum(len(ids) for ids in self.list_ids))

    @property
    def inner_product(self) -> bool:
        return self.metric is Metric.INNER_PRODUCT

    def list_sizes(self) -> np.ndarray:
        return np.array([len(ids) for ids in self.list_ids], dtype=np.int64)

    def bytes_per_vector(self) -> int:
        width = 1 if self.quantization is Quantization.SCALAR8 else 4
        return 8 + width * self.dim

    def cluster_bytes(self) -> np.ndarray:
        """Storage footprint of each inverted list (ids + payload)."""
        return self.list_sizes() * self.bytes_per_vector()

    def decoded(self, cluster_id: int) -> np.ndarray:
        data = self.list_data[cluster_id]
        if self.quantization is Quantization.SCALAR8:
            return (self.sq_offset.astype(np.float64) + self.sq_scale.astype(np.float64) * data).astype(np.float32)
        return data

    def cluster_distances(self, query: np.ndarray, cluster_id: int) -> np.ndarray:
        return list_distances(self, self.list_data[cluster_id], query)

    def check_cluster(self, cluster_id) -> int:
        c = int(cluster_id)
        if not 0 <= c < self.n_clusters:
            raise KeyError(f"unknown cluster id {cluster_id}")
        return c


def list_distances(layout, data: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Run the scan kernel over one inverted list.

    ``layout`` supplies metric and quantization parameters; both ``IvfIndex``
    and shard fragments qualify.
    """
    if layout.quantization is Quantization.SCALAR8:
        return kernels.row_distances(
            data,
            query,
            layout.inner_product,
            layout.sq_scale.astype(np.float64),
            layout.sq_offset.astype(np.float64),
        )
    return kernels.row_distances(data, query, layout.inner_product)


# -- training -----------------------------------------------------------------


def _sq_dist_to_centers(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    x2 = np.einsum("ij,ij->i", x, x)[:, None]
    c2 = np.einsum("ij,ij->i", centers, centers)[None, :]
    return np.maximum(x2 - 2.0 * x @ centers.T + c2, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = _sq_dist_to_centers(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than clusters left: take unused points in order
            centers[i] = x[i % n]
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            centers[i] = x[min(pick, n - 1)]
        closest = np.minimum(closest, _sq_dist_to_centers(x, centers[i : i + 1])[:, 0])
    return centers


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 25,
    tol: float = 1e-4,
) -> tuple[np.ndarray, int]:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` iterations or once the centroid shift relative
    to the centroid norm drops below ``tol``. An emptied cluster is reseeded
    with the point of the largest cluster farthest from its centroid.
    Returns (centroids, iterations run).
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    it = 0
    for it in range(1, max_iter + 1):
        dist = _sq_dist_to_centers(x, centers)
        assign = np.argmin(dist, axis=1)
        counts = np.bincount(assign, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, assign, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = members[int(np.argmax(dist[members, big]))]
            new[c] = x[far]
            assign[far] = c
            counts[big] -= 1
            counts[c] = 1
        shift = np.linalg.norm(new - centers)
        scale = max(np.linalg.norm(centers), 1e-30)
        centers = new
        if shift / scale < tol:
            break
    return centers, it


def assign_nearest(
    vectors: np.ndarray, centroids: np.ndarray, inner_product: bool = False, chunk: int = 4096
) -> np.ndarray:
    """Exact nearest centroid per row (lowest cluster id on ties)."""
    out = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), chunk):
        block = np.asarray(vectors[start : start + chunk], dtype=np.float64)
        out[start : start + chunk] = np.argmin(
            kernels.pairwise_distances(block, centroids, inner_product), axis=1
        )
    return out


def _scalar8_params(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = x.min(axis=0).astype(np.float32)
    hi = x.max(axis=0).astype(np.float32)
    span = (hi.astype(np.float64) - lo) / 255.0
    scale = np.where(span > 0, span, 1.0).astype(np.float32)
    return scale, lo


def _encode_scalar8(x: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    codes = np.rint((x.astype(np.float64) - offset) / scale)
    return np.clip(codes, 0, 255).astype(np.uint8)


def build_index(
    dataset: VectorDataset,
    centroids: np.ndarray,
    quantization: Quantization | str = Quantization.NONE,
    metric: Metric | str = Metric.L2,
) -> IvfIndex:
    """Populate inverted lists for fixed centroids."""
    quantization = Quantization(quantization)
    metric = Metric(metric)
    centroids = np.ascontiguousarray(centroids, dtype=np.float32)
    assign = assign_nearest(dataset.vectors, centroids, metric is Metric.INNER_PRODUCT)
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(centroids.shape[0] + 1))
    scale = offset = None
    if quantization is Quantization.SCALAR8:
        scale, offset = _scalar8_params(dataset.vectors)
    ids, data = [], []
    for c in range(centroids.shape[0]):
        members = order[bounds[c] : bounds[c + 1]]
        ids.append(dataset.ids[members].copy())
        rows = dataset.vectors[members]
        if quantization is Quantization.SCALAR8:
            rows = _encode_scalar8(rows, scale, offset)
        data.append(np.ascontiguousarray(rows))
    return IvfIndex(metric, quantization, centroids, tuple(ids), tuple(data), scale, offset)


def train_ivf(
    dataset: VectorDataset,
    n_clusters: int,
    quantization: Quantization | str = Quantization.NONE,
    seed: int = 0,
    metric: Metric | str = Metric.L2,
    max_iter: int = 25,
    tol: float = 1e-4,
    max_points_per_centroid: int = 256,
) -> IvfIndex:
    """Train centroids with k-means and assign every vector to its nearest one."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    if not np.all(np.isfinite(dataset.vectors)):
        raise ValueError("dataset contains non-finite values")
    rng = np.random.default_rng(seed)
    sample = dataset.vectors
    cap = n_clusters * max_points_per_centroid
    if n > cap:
        sample = dataset.vectors[np.sort(rng.choice(n, size=cap, replace=False))]
    centroids, _ = kmeans(sample, n_clusters, seed=seed, max_iter=max_iter, tol=tol)
    return build_index(dataset, centroids, quantization, metric)


# -- search ---------------------------------------------------------------------


def shortlist_arrays(index: IvfIndex, queries, nprobe: int, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """(cluster ids, centroid distances), each of shape (n_queries, min(nprobe, n_clusters))."""
    if nprobe < 1:
        raise ValueError("nprobe must be >= 1")
    q = _finite_2d("queries", queries, index.dim)
    p = min(nprobe, index.n_clusters)
    ids = np.empty((len(q), p), dtype=np.int64)
    dists = np.empty((len(q), p), dtype=np.float64)
    for start in range(0, len(q), chunk):
        d = kernels.pairwise_distances(q[start : start + chunk], index.centroids, index.inner_product)
        order = np.argsort(d, axis=1, kind="stable")[:, :p]
        ids[start : start + chunk] = order
        dists[start : start + chunk] = np.take_along_axis(d, order, axis=1)
    return ids, dists


def coarse_quantize(index: IvfIndex, queries, nprobe: int) -> list[ClusterShortlist]:
    ids, dists = shortlist_arrays(index, queries, nprobe)
    return [ClusterShortlist(i, ids[i], dists[i]) for i in range(len(ids))]


def scan_clusters(index: IvfIndex, query, cluster_ids: Iterable[int], k: int, query_id: int = 0) -> TopK:
    """Exact distances over every vector in the named clusters, top-k."""
    q = _finite_2d("query", query, index.dim)[0]
    cids = [index.check_cluster(c) for c in cluster_ids]
    if not cids:
        return TopK(query_id, np.empty(0, np.uint64), np.empty(0, np.float64))
    ids = np.concatenate([index.list_ids[c] for c in cids])
    dists = np.concatenate([index.cluster_distances(q, c) for c in cids])
    return select_topk(ids, dists, k, query_id)


def search(index: IvfIndex, queries, nprobe: int, k: int) -> list[TopK]:
    """Monolithic IVF search: coarse quantization then scan of the probed lists."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _finite_2d("queries", queries, index.dim)
    short, _ = shortlist_arrays(index, q, nprobe)
    return [scan_clusters(index, q[i], short[i], k, query_id=i) for i in range(len(q))]


def exact_knn(dataset: VectorDataset, queries, k: int, metric: Metric | str = Metric.L2) -> list[TopK]:
    """Exhaustive k-NN over the whole dataset with the same distance kernel."""
    ip = Metric(metric) is Metric.INNER_PRODUCT
    q = _finite_2d("queries", queries, dataset.dim)
    return [
        select_topk(dataset.ids, kernels.row_distances(dataset.vectors, q[i], ip), k, i)
        for i in range(len(q))
    ]


def recall_at_k(results: Sequence[TopK], truth: Sequence[TopK]) -> float:
    hits = total = 0
    for got, want in zip(results, truth):
        hits += len(np.intersect1d(got.ids, want.ids))
        total += len(want.ids)
    return hits / total if total else 1.0


# -- binary format ------------------------------------------------------------

INDEX_MAGIC = b"TIVF"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sHBBII")
_LIST_HEADER = struct.Struct("<IQ")


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError("truncated file")
    return buf


def _read_array(stream: BinaryIO, dtype: str, count: int) -> np.ndarray:
    dt = np.dtype(dtype)
    return np.frombuffer(_read_exact(stream, dt.itemsize * count), dtype=dt).copy()


def write_index(index: IvfIndex, stream: BinaryIO) -> None:
    stream.write(
        _INDEX_HEADER.pack(
            INDEX_MAGIC,
            INDEX_VERSION,
            _METRIC_CODES[index.metric],
            _QUANT_CODES[index.quantization],
            index.dim,
            index.n_clusters,
        )
    )
    stream.write(index.centroids.astype("<f4").tobytes())
    if index.quantization is Quantization.SCALAR8:
        stream.write(index.sq_scale.astype("<f4").tobytes())
        stream.write(index.sq_offset.astype("<f4").tobytes())
    payload = "u1" if index.quantization is Quantization.SCALAR8 else "<f4"
    for c in range(index.n_clusters):
        ids = index.list_ids[c]
        stream.write(_LIST_HEADER.pack(c, len(ids)))
        stream.write(ids.astype("<u8").tobytes())
        stream.write(index.list_data[c].astype(payload).tobytes())


def read_index(stream: BinaryIO) -> IvfIndex:
    magic, version, metric, quant, dim, n_clusters = _INDEX_HEADER.unpack(_read_exact(stream, _INDEX_HEADER.size))
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    metric = {v: k for k, v in _METRIC_CODES.items()}.get(metric)
    quant = {v: k for k, v in _QUANT_CODES.items()}.get(quant)
    if metric is None or quant is None:
        raise FormatError("unknown metric or quantization code")
    centroids = _read_array(stream, "<f4", dim * n_clusters).reshape(n_clusters, dim).astype(np.float32)
    scale = offset = None
    if quant is Quantization.SCALAR8:
        scale = _read_array(stream, "<f4", dim).astype(np.float32)
        offset = _read_array(stream, "<f4", dim).astype(np.float32)
    payload = "u1" if quant is Quantization.SCALAR8 else "<f4"
    lists_ids, lists_data = [None] * n_clusters, [None] * n_clusters
    for _ in range(n_clusters):
        cid, count = _LIST_HEADER.unpack(_read_exact(stream, _LIST_HEADER.size))
        if cid >= n_clusters or lists_ids[cid] is not None:
            raise FormatError(f"bad cluster id {cid}")
        lists_ids[cid] = _read_array(stream, "<u8", count).astype(np.uint64)
        data = _read_array(stream, payload, count * dim).reshape(count, dim)
        lists_data[cid] = np.ascontiguousarray(data.astype(np.uint8 if payload == "u1" else np.float32))
    if stream.read(1):
        raise FormatError("trailing bytes after last cluster")
    return IvfIndex(metric, quant, centroids, tuple(lists_ids), tuple(lists_data), scale, offset)


def index_to_bytes(index: IvfIndex) -> bytes:
    buf = io.BytesIO()
    write_index(index, buf)
    return buf.getvalue()


def index_from_bytes(data: bytes) -> IvfIndex:
    return read_index(io.BytesIO(data))


def save_index(index: IvfIndex, path) -> None:
    with open(path, "wb") as fh:
        write_index(index, fh)


def load_index(path) -> IvfIndex:
    with open(path, "rb") as fh:
        return read_index(fh)
