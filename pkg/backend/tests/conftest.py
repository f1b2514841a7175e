"""Shared fixtures: seeded generators, random ensembles and isolated settings."""

import numpy as np
import pytest

from app.config import Settings, reset_settings
from core.partitions import ExtendedPartition, Partition, PartitionEnsemble


def random_partition(rng: np.random.Generator, n: int, max_clusters: int) -> Partition:
    partition, _ = Partition.from_labels(rng.integers(0, max_clusters, size=n))
    return partition


def random_ensemble(seed: int, n: int, m: int, max_clusters: int = 8) -> PartitionEnsemble:
    rng = np.random.default_rng(seed)
    return PartitionEnsemble([random_partition(rng, n, int(rng.integers(1, max_clusters + 1))) for _ in range(m)])


def random_pairing(seed: int, ensemble: PartitionEnsemble, n_test: int):
    """Random test labels per partition, including clusters without training points (-1)."""
    rng = np.random.default_rng(seed)
    return [
        ExtendedPartition(p, rng.integers(-1, p.n_clusters, size=n_test))
        for p in ensemble.partitions
    ]


def dense_gram(ensemble: PartitionEnsemble) -> np.ndarray:
    return sum(p.co_membership() for p in ensemble.partitions) / ensemble.m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def settings(tmp_path, monkeypatch):
    """Settings pointing data and output directories into tmp_path."""
    monkeypatch.setenv("RPK_DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("RPK_OUTPUT_DIR", str(tmp_path / "results"))
    reset_settings()
    yield Settings()
    reset_settings()
