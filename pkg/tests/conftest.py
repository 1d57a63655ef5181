from dataclasses import dataclass

import numpy as np
import pytest

from tieredrag.datagen import SyntheticCorpus, make_corpus, make_queries
from tieredrag.profiler import (
    AccessProfile,
    CoverageCurve,
    LatencyModel,
    SigmaMax,
    coverage_curve,
    modeled_latency,
    profile_access,
    profile_sigma_max,
)
from tieredrag.vecstore import IvfIndex, VectorDataset, train_ivf

BATCH_GRID = [1, 2, 4, 8, 16, 32, 64, 128, 256]


@dataclass(frozen=True, eq=False)
class Desk:
    """The 50k-vector, 256-cluster synthetic index profiled at nprobe 16."""

    corpus: SyntheticCorpus
    index: IvfIndex
    calibration: np.ndarray
    nprobe: int
    profile: AccessProfile
    curve: CoverageCurve
    sigma: SigmaMax
    latency: LatencyModel


@pytest.fixture(scope="session")
def desk() -> Desk:
    corpus = make_corpus()
    index = train_ivf(corpus.dataset, 256, seed=0)
    cal, _ = make_queries(corpus, 2000, seed=3)
    profile = profile_access(index, cal, 16)
    curve = coverage_curve(profile)
    sigma = profile_sigma_max(index, cal, 16, curve)
    latency = LatencyModel.fit(modeled_latency(index, cal, BATCH_GRID, 16))
    return Desk(corpus, index, cal, 16, profile, curve, sigma, latency)


@pytest.fixture(scope="session")
def small_corpus() -> SyntheticCorpus:
    return make_corpus(n_vectors=4000, dim=16, n_modes=16, seed=5)


@pytest.fixture(scope="session")
def small_index(small_corpus) -> IvfIndex:
    return train_ivf(small_corpus.dataset, 32, seed=1)


@pytest.fixture(scope="session")
def small_queries(small_corpus) -> np.ndarray:
    return make_queries(small_corpus, 200, seed=9)[0]


def gaussian_dataset(n=500, dim=8, seed=0) -> VectorDataset:
    rng = np.random.default_rng(seed)
    return VectorDataset.from_vectors(rng.normal(size=(n, dim)).astype(np.float32))


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
