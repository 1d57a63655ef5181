"""Synthetic corpora: Gaussian-mixture vectors with Zipf-skewed query popularity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vecstore import VectorDataset


@dataclass(frozen=True)
class SyntheticCorpus:
    dataset: VectorDataset
    mode_centers: np.ndarray
    mode_of: np.ndarray
    noise: float

    @property
    def n_modes(self) -> int:
        return len(self.mode_centers)


def make_corpus(
    n_vectors: int = 50_000,
    dim: int = 32,
    n_modes: int = 64,
    seed: int = 0,
    separation: float = 4.0,
    noise: float = 1.0,
) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(n_modes, dim))
    mode_of = rng.integers(n_modes, size=n_vectors)
    vectors = centers[mode_of] + rng.normal(scale=noise, size=(n_vectors, dim))
    dataset = VectorDataset(vectors.astype(np.float32), np.arange(n_vectors, dtype=np.uint64))
    return SyntheticCorpus(dataset, centers.astype(np.float32), mode_of, noise)


def zipf_weights(n: int, s: float) -> np.ndarray:
    """Probability of ranks 1..n under a truncated Zipf law (s=0 is uniform)."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def make_queries(
    corpus: SyntheticCorpus,
    n_queries: int,
    zipf_s: float = 1.2,
    seed: int = 1,
    popularity: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw queries near mode centers, picking modes by Zipf popularity.

    ``popularity`` is a permutation giving the mode at each popularity rank;
    the default ranks modes by index. Permuting it flips the hot set.
    Returns (queries, mode of each query).
    """
    rng = np.random.default_rng(seed)
    order = np.arange(corpus.n_modes) if popularity is None else np.asarray(popularity)
    ranks = rng.choice(corpus.n_modes, size=n_queries, p=zipf_weights(corpus.n_modes, zipf_s))
    modes = order[ranks]
    queries = corpus.mode_centers[modes] + rng.normal(scale=corpus.noise, size=(n_queries, corpus.mode_centers.shape[1]))
    return queries.astype(np.float32), modes


def flipped_popularity(n_modes: int, seed: int = 7) -> np.ndarray:
    """A popularity order whose head is disjoint from the default head."""
    rng = np.random.default_rng(seed)
    half = n_modes // 2
    tail = np.arange(half, n_modes)
    head = np.arange(half)
    return np.concatenate([rng.permutation(tail), rng.permutation(head)])
