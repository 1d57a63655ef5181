"""Hot/cold split of an IVF index into fast-tier shards plus a host remainder."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .partitioner import PartitionPlan
from .profiler import AccessProfile
from .vecstore import (
    FormatError,
    IvfIndex,
    Metric,
    Quantization,
    TopK,
    _read_array,
    _read_exact,
    list_distances,
    select_topk,
)


@dataclass(frozen=True, eq=False)
class ShardMap:
    """Global cluster id -> (shard, local id) for hot clusters; the rest are cold.

    Stored as two dense arrays indexed by global id; ``shard_of`` is -1 for
    cold clusters.
    """

    n_shards: int
    shard_of: np.ndarray
    local_of: np.ndarray
    shard_bytes: np.ndarray
    version: int = 0

    def __post_init__(self):
        for arr in (self.shard_of, self.local_of, self.shard_bytes):
            arr.flags.writeable = False

    @property
    def n_clusters(self) -> int:
        return len(self.shard_of)

    @property
    def hot(self) -> dict[int, tuple[int, int]]:
        return {int(g): (int(self.shard_of[g]), int(self.local_of[g])) for g in np.flatnonzero(self.shard_of >= 0)}

    @property
    def cold(self) -> np.ndarray:
        return np.flatnonzero(self.shard_of < 0)

    def hot_ids(self) -> np.ndarray:
        return np.flatnonzero(self.shard_of >= 0)

    def clusters_on(self, shard: int) -> np.ndarray:
        """Global ids resident on ``shard``, ordered by local id."""
        members = np.flatnonzero(self.shard_of == shard)
        return members[np.argsort(self.local_of[members], kind="stable")]

    def to_dict(self) -> dict:
        return {
            "n_shards": self.n_shards,
            "shard_of": self.shard_of.tolist(),
            "local_of": self.local_of.tolist(),
            "shard_bytes": self.shard_bytes.tolist(),
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardMap":
        return cls(
            int(d["n_shards"]),
            np.asarray(d["shard_of"], dtype=np.int64),
            np.asarray(d["local_of"], dtype=np.int64),
            np.asarray(d["shard_bytes"], dtype=np.int64),
            int(d.get("version", 0)),
        )

    def with_version(self, version: int) -> "ShardMap":
        return ShardMap(self.n_shards, self.shard_of.copy(), self.local_of.copy(), self.shard_bytes.copy(), version)


@dataclass(frozen=True, eq=False)
class ShardIndex:
    """A fragment of an IVF index holding only its resident clusters.

    Local cluster ``j`` is global cluster ``global_ids[j]``. Only resident
    centroids are kept.
    """

    shard_id: int
    metric: Metric
    quantization: Quantization
    global_ids: np.ndarray
    centroids: np.ndarray
    list_ids: tuple
    list_data: tuple
    sq_scale: np.ndarray | None = None
    sq_offset: np.ndarray | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.global_ids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def inner_product(self) -> bool:
        return self.metric is Metric.INNER_PRODUCT

    @property
    def ntotal(self) -> int:
        return int(sum(len(i) for i in self.list_ids))

    def scan(self, query: np.ndarray, local_ids: Sequence[int], k: int, query_id: int = 0) -> TopK:
        q = np.asarray(query, dtype=np.float64)
        local_ids = [int(j) for j in local_ids]
        for j in local_ids:
            if not 0 <= j < self.n_clusters:
                raise KeyError(f"shard {self.shard_id} has no local cluster {j}")
        if not local_ids:
            return TopK(query_id, np.empty(0, np.uint64), np.empty(0, np.float64))
        ids = np.concatenate([self.list_ids[j] for j in local_ids])
        dists = np.concatenate([list_distances(self, self.list_data[j], q) for j in local_ids])
        return select_topk(ids, dists, k, query_id)


@dataclass(frozen=True, eq=False)
class IndexSplit:
    shard_map: ShardMap
    shards: tuple
    cold: IvfIndex


def round_robin_deal(sizes: Sequence[int], cluster_ids: Sequence[int], n_shards: int) -> list[list[int]]:
    """Sort clusters by size (descending, ties by id) and deal them out in turn."""
    sizes = np.asarray(sizes, dtype=np.int64)
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    order = np.lexsort((cluster_ids, -sizes))
    hands = [[] for _ in range(n_shards)]
    for turn, pos in enumerate(order):
        hands[turn % n_shards].append(int(cluster_ids[pos]))
    return hands


def split_index(index: IvfIndex, profile: AccessProfile | None, plan: PartitionPlan, n_shards: int) -> IndexSplit:
    """Materialize a plan: shard the hot clusters, keep the rest as the cold index.

    The cold index keeps every centroid (coarse quantization stays on the
    host) but empties the lists of hot clusters.
    """
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    hot = np.unique(np.asarray(plan.hot_cluster_ids, dtype=np.int64))
    if hot.size and (hot.min() < 0 or hot.max() >= index.n_clusters):
        raise KeyError("plan references clusters the index does not have")
    nbytes = index.cluster_bytes() if profile is None else np.asarray(profile.cluster_bytes, dtype=np.int64)
    if len(nbytes) != index.n_clusters:
        raise ValueError("profile does not match the index")
    hands = round_robin_deal(nbytes[hot], hot, n_shards)
    shard_of = np.full(index.n_clusters, -1, dtype=np.int64)
    local_of = np.full(index.n_clusters, -1, dtype=np.int64)
    shard_bytes = np.zeros(n_shards, dtype=np.int64)
    shards = []
    for s, members in enumerate(hands):
        for j, g in enumerate(members):
            shard_of[g] = s
            local_of[g] = j
        shard_bytes[s] = int(nbytes[members].sum()) if members else 0
        shards.append(make_shard(index, s, members))
    shard_map = ShardMap(n_shards, shard_of, local_of, shard_bytes)
    return IndexSplit(shard_map, tuple(shards), cold_index(index, hot))


def make_shard(index: IvfIndex, shard_id: int, members: Sequence[int]) -> ShardIndex:
    members = np.asarray(members, dtype=np.int64)
    return ShardIndex(
        shard_id,
        index.metric,
        index.quantization,
        members,
        np.ascontiguousarray(index.centroids[members]),
        tuple(index.list_ids[g].copy() for g in members),
        tuple(index.list_data[g].copy() for g in members),
        index.sq_scale,
        index.sq_offset,
    )


def cold_index(index: IvfIndex, hot: Sequence[int]) -> IvfIndex:
    hot = set(int(c) for c in hot)
    empty_ids = np.empty(0, dtype=np.uint64)
    empty_data = np.empty((0, index.dim), dtype=index.list_data[0].dtype if index.list_data else np.float32)
    ids = tuple(empty_ids if c in hot else index.list_ids[c] for c in range(index.n_clusters))
    data = tuple(empty_data.copy() if c in hot else index.list_data[c] for c in range(index.n_clusters))
    return IvfIndex(index.metric, index.quantization, index.centroids, ids, data, index.sq_scale, index.sq_offset)


@dataclass(frozen=True)
class RemappedShortlist:
    per_shard: dict = field(default_factory=dict)
    cold: list = field(default_factory=list)


def remap(shard_map: ShardMap, cluster_ids: Sequence[int], excluded_shards=frozenset()) -> RemappedShortlist:
    """Split a shortlist into per-shard local id lists and a cold list.

    Clusters on an ``excluded_shards`` member go to the cold list. Order
    within every bucket follows the shortlist.
    """
    per_shard: dict[int, list[int]] = {}
    cold: list[int] = []
    n = shard_map.n_clusters
    for c in cluster_ids:
        c = int(c)
        if not 0 <= c < n:
            raise KeyError(f"unknown cluster id {c}")
        s = int(shard_map.shard_of[c])
        if s < 0 or s in excluded_shards:
            cold.append(c)
        else:
            per_shard.setdefault(s, []).append(int(shard_map.local_of[c]))
    return RemappedShortlist(per_shard, cold)


# -- shard file format ----------------------------------------------------------

SHARD_MAGIC = b"TSHD"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sHHIIBB")
_LOCAL_HEADER = struct.Struct("<IIQ")
_METRICS = {Metric.L2: 0, Metric.INNER_PRODUCT: 1}
_QUANTS = {Quantization.NONE: 0, Quantization.SCALAR8: 1}


def write_shard(shard: ShardIndex, stream: BinaryIO) -> None:
    stream.write(
        _SHARD_HEADER.pack(
            SHARD_MAGIC, SHARD_VERSION, shard.shard_id, shard.n_clusters, shard.dim, _METRICS[shard.metric], _QUANTS[shard.quantization]
        )
    )
    sq8 = shard.quantization is Quantization.SCALAR8
    if sq8:
        stream.write(shard.sq_scale.astype("<f4").tobytes())
        stream.write(shard.sq_offset.astype("<f4").tobytes())
    for j in range(shard.n_clusters):
        ids = shard.list_ids[j]
        stream.write(_LOCAL_HEADER.pack(int(shard.global_ids[j]), j, len(ids)))
        stream.write(shard.centroids[j].astype("<f4").tobytes())
        stream.write(ids.astype("<u8").tobytes())
        stream.write(shard.list_data[j].astype("u1" if sq8 else "<f4").tobytes())


def read_shard(stream: BinaryIO) -> ShardIndex:
    magic, version, shard_id, n_local, dim, metric, quant = _SHARD_HEADER.unpack(_read_exact(stream, _SHARD_HEADER.size))
    if magic != SHARD_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise FormatError(f"unsupported shard version {version}")
    metric = {v: k for k, v in _METRICS.items()}.get(metric)
    quant = {v: k for k, v in _QUANTS.items()}.get(quant)
    if metric is None or quant is None:
        raise FormatError("unknown metric or quantization code")
    sq8 = quant is Quantization.SCALAR8
    scale = offset = None
    if sq8:
        scale = _read_array(stream, "<f4", dim).astype(np.float32)
        offset = _read_array(stream, "<f4", dim).astype(np.float32)
    global_ids = np.empty(n_local, dtype=np.int64)
    centroids = np.empty((n_local, dim), dtype=np.float32)
    ids, data = [], []
    for j in range(n_local):
        g, local, count = _LOCAL_HEADER.unpack(_read_exact(stream, _LOCAL_HEADER.size))
        if local != j:
            raise FormatError(f"local ids out of order at {j}")
        global_ids[j] = g
        centroids[j] = _read_array(stream, "<f4", dim)
        ids.append(_read_array(stream, "<u8", count).astype(np.uint64))
        rows = _read_array(stream, "u1" if sq8 else "<f4", count * dim).reshape(count, dim)
        data.append(np.ascontiguousarray(rows.astype(np.uint8 if sq8 else np.float32)))
    if stream.read(1):
        raise FormatError("trailing bytes after last cluster")
    return ShardIndex(shard_id, metric, quant, global_ids, centroids, tuple(ids), tuple(data), scale, offset)


def serialize_shard(shard: ShardIndex) -> bytes:
    buf = io.BytesIO()
    write_shard(shard, buf)
    return buf.getvalue()


def load_shard(data: bytes) -> ShardIndex:
    return read_shard(io.BytesIO(data))
