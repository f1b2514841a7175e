"""
Partition samplers.

Three families produce Partition samples:
  - Random Forest: train a regression tree, cut it at a random depth.
  - Fast Cluster: nearest of 2^s random centers under a random dimension mask.
  - Data-defined: the category classes of a randomly chosen column.

Every sampler also returns an out-of-sample extension handle so test points
can be placed into the same clusters.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial import cKDTree

from app.schemas import FastClusterConfig, SamplerSpec, TreeConfig
from core.errors import DataError, DimensionError, ParameterError
from core.partitions import Partition, PartitionEnsemble
from core.trees import TreeModel, train_rf_tree

logger = logging.getLogger(__name__)

# Up to this many centers the nearest-center search is an exact brute-force
# scan; above it a KD-tree is queried, starting from KDTREE_CANDIDATES
# neighbours and widening while the farthest candidate still ties.
BRUTE_FORCE_CENTERS = 64
KDTREE_CANDIDATES = 4
_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class SamplerSeed:
    """
    Seed of one partition sample: a 64-bit seed plus a per-sample stream id.

    Identical (seed, stream) pairs reproduce identical partitions.
    """
    seed: int
    stream: int = 0

    def rng(self, purpose: int = 0) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(self.stream, purpose)))


def lookup_labels(keys: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Map raw labels to contiguous labels via sorted keys; unknown labels become -1."""
    raw = np.asarray(raw)
    idx = np.searchsorted(keys, raw)
    idx_clipped = np.minimum(idx, len(keys) - 1)
    found = (idx < len(keys)) & (keys[idx_clipped] == raw)
    return np.where(found, idx_clipped, -1).astype(np.int64)


# ============================================================================
# Random Forest sampler
# ============================================================================

class TreeExtension:
    """Routes test rows through a trained tree and cuts at a fixed depth."""

    def __init__(self, tree: TreeModel, depth: int, keys: np.ndarray):
        self.tree = tree
        self.depth = depth
        self.keys = keys

    def assign(self, X_test: Any) -> np.ndarray:
        leaves = self.tree.route(X_test)
        return lookup_labels(self.keys, self.tree.ancestor_at_depth(leaves, self.depth))


def partition_at_depth(t: TreeModel, d: int) -> Tuple[Partition, np.ndarray]:
    """
    Ancestor partition of the training points at depth d.

    Returns:
        (partition, keys) with keys[c] the node id of cluster c
    """
    if t.leaf_assignment.size == 0:
        raise DataError("TreeModel has no leaf assignments")
    ancestors = t.ancestor_at_depth(t.leaf_assignment, d)
    return Partition.from_labels(ancestors)


def sample_depth(t: TreeModel, seed: SamplerSeed) -> int:
    """d ~ DiscreteUniform(0, h) with h the tree's max depth."""
    return int(seed.rng(purpose=1).integers(0, t.max_depth + 1))


def rf_partition(t: TreeModel, seed: SamplerSeed) -> Partition:
    """Cut the tree at a uniformly sampled depth."""
    partition, _ = partition_at_depth(t, sample_depth(t, seed))
    return partition


def rf_extend(t: TreeModel, X_test: Any, d: int) -> np.ndarray:
    """
    Labels of test rows in the depth-d partition's label space.

    Test rows reaching a node that holds no training point get -1.
    """
    _, keys = partition_at_depth(t, d)
    return TreeExtension(t, d, keys).assign(X_test)


def _draw_rf(X: np.ndarray, y: np.ndarray, config: TreeConfig, seed: SamplerSeed) -> Tuple[Partition, TreeExtension]:
    tree = train_rf_tree(X, y, seed.rng(purpose=0), config)
    d = sample_depth(tree, seed)
    partition, keys = partition_at_depth(tree, d)
    return partition, TreeExtension(tree, d, keys)


# ============================================================================
# Fast Cluster sampler
# ============================================================================

def _nearest_brute(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    n, dim = points.shape
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // max(1, centers.shape[0] * dim))
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, rows_per_chunk):
        block = points[start:start + rows_per_chunk]
        diff = block[:, None, :] - centers[None, :, :]
        dist2 = np.einsum("ijk,ijk->ij", diff, diff)
        # argmin returns the first minimum: lowest center index wins ties
        out[start:start + rows_per_chunk] = np.argmin(dist2, axis=1)
    return out


class CenterIndex:
    """
    KD-tree over the distinct masked centers.

    Coinciding centers are collapsed to their lowest index, so a query only
    has to break ties between geometrically distinct centers.
    """

    def __init__(self, centers: np.ndarray):
        unique, first = np.unique(centers, axis=0, return_index=True)
        self.unique = unique
        self.first = first.astype(np.int64)
        self.tree = cKDTree(unique)

    def nearest(self, points: np.ndarray) -> np.ndarray:
        n_unique = self.first.size
        out = np.empty(points.shape[0], dtype=np.int64)
        pending = np.arange(points.shape[0])
        k = min(KDTREE_CANDIDATES, n_unique)
        while pending.size:
            _, idx = self.tree.query(points[pending], k=k)
            idx = idx.reshape(pending.size, k)
            diff = points[pending, None, :] - self.unique[idx]
            dist2 = np.einsum("ijk,ijk->ij", diff, diff)
            ties = dist2 == dist2.min(axis=1, keepdims=True)
            out[pending] = np.where(ties, self.first[idx], np.iinfo(np.int64).max).min(axis=1)
            if k == n_unique:
                break
            # the k-th candidate still ties with the best: more may lie beyond it
            pending = pending[ties[:, -1]]
            k = min(2 * k, n_unique)
        return out


def nearest_center(points: np.ndarray, centers: np.ndarray, index: Optional[CenterIndex] = None) -> np.ndarray:
    """
    Index of the nearest center (Euclidean) for each point; ties go to the lowest index.

    Args:
        points: M x D' masked coordinates
        centers: C x D' masked center coordinates
        index: Optional prebuilt CenterIndex over ``centers``
    """
    if centers.shape[0] <= BRUTE_FORCE_CENTERS:
        return _nearest_brute(points, centers)
    return (index if index is not None else CenterIndex(centers)).nearest(points)


class CenterExtension:
    """Stored centers + dimension mask; assigns test rows to the nearest stored center."""

    def __init__(self, centers: np.ndarray, mask: np.ndarray, keys: np.ndarray):
        self.centers = centers
        self.mask = mask
        self.keys = keys
        self._index: Optional[CenterIndex] = None

    @property
    def n_features(self) -> int:
        return int(self.mask.size)

    def nearest(self, X: Any) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(f"Expected rows with {self.n_features} features, got shape {X.shape}")
        masked_centers = self.centers[:, self.mask]
        if masked_centers.shape[0] > BRUTE_FORCE_CENTERS and self._index is None:
            self._index = CenterIndex(masked_centers)
        return nearest_center(X[:, self.mask], masked_centers, self._index)

    def assign(self, X_test: Any) -> np.ndarray:
        return lookup_labels(self.keys, self.nearest(X_test))


def default_center_exponent(n: int) -> int:
    return max(0, math.ceil(math.log2(max(n, 1))))


def fast_cluster_partition(
    X: Any,
    config: Optional[FastClusterConfig] = None,
    seed: Optional[SamplerSeed] = None,
) -> Tuple[Partition, CenterExtension]:
    """
    Draw one Fast Cluster partition.

    Samples a dimension mask (redrawn while empty), s ~ U{0..h}, then
    min(2^s, N) distinct center rows; each point joins its nearest center
    on the masked dimensions.

    Returns:
        (partition, extension) where the extension stores centers and mask
    """
    config = config or FastClusterConfig()
    seed = seed or SamplerSeed(0)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DataError(f"Fast Cluster needs a non-empty N x D matrix, got shape {X.shape}")
    n, d = X.shape
    rng = seed.rng()

    mask = rng.random(d) < config.dim_keep_prob
    while not mask.any():
        mask = rng.random(d) < config.dim_keep_prob

    h = config.h if config.h is not None else default_center_exponent(n)
    s = int(rng.integers(0, h + 1))
    n_centers = min(2 ** s, n)
    center_rows = rng.choice(n, size=n_centers, replace=False)
    return assign_to_centers(X, center_rows, mask)


def assign_to_centers(X: Any, center_rows: Any, mask: Any) -> Tuple[Partition, CenterExtension]:
    """
    Cluster every row of X by its nearest center row on the masked dimensions.

    Centers are ordered by row index, so ties go to the lowest-index center.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != X.shape[1] or not mask.any():
        raise ParameterError("The dimension mask must match D and keep at least one dimension")
    center_rows = np.sort(np.asarray(center_rows, dtype=np.int64))
    extension = CenterExtension(X[center_rows].copy(), mask, np.zeros(0, dtype=np.int64))
    partition, keys = Partition.from_labels(extension.nearest(X))
    extension.keys = keys
    return partition, extension


def fast_cluster_extend(extension: CenterExtension, X_test: Any) -> np.ndarray:
    """Assign test rows with the stored centers and mask."""
    return extension.assign(X_test)


def _draw_fast_cluster(X: np.ndarray, config: FastClusterConfig, seed: SamplerSeed) -> Tuple[Partition, CenterExtension]:
    return fast_cluster_partition(X, config, seed)


# ============================================================================
# Data-defined samplers
# ============================================================================

class CategoryExtension:
    """Looks a test item's category up in the chosen column."""

    def __init__(self, column: int, keys: np.ndarray):
        self.column = column
        self.keys = keys

    def assign(self, columns_test: Any) -> np.ndarray:
        table = np.asarray(columns_test)
        if table.ndim != 2 or table.shape[1] <= self.column:
            raise DimensionError(f"Expected a test table with more than {self.column} columns, got {table.shape}")
        return lookup_labels(self.keys, table[:, self.column])


def categorical_partitions(
    column_set: Sequence[Any],
    m: int,
    seed: int = 0,
) -> PartitionEnsemble:
    """
    Data-defined partitions: each sample picks a column uniformly and clusters
    items by that column's category.

    Args:
        column_set: Categorical columns, each of length N (codes or labels)
        m: Number of samples
        seed: Ensemble seed

    Returns:
        PartitionEnsemble with category lookup extensions
    """
    if not column_set:
        raise ParameterError("categorical_partitions needs at least one column")
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    columns = [np.asarray(c).reshape(-1) for c in column_set]
    n = columns[0].size
    if any(c.size != n for c in columns):
        raise DimensionError("All categorical columns must have the same length")

    # each column's partition is computed once and shared by the samples that pick it
    cache: dict = {}
    partitions: List[Partition] = []
    extensions: List[CategoryExtension] = []
    for i in range(m):
        j = int(SamplerSeed(seed, i).rng().integers(0, len(columns)))
        if j not in cache:
            cache[j] = Partition.from_labels(columns[j])
        partition, keys = cache[j]
        partitions.append(partition)
        extensions.append(CategoryExtension(j, keys))

    provenance = {"kind": "categorical", "seed": int(seed), "m": int(m), "n": int(n), "n_columns": len(columns)}
    return PartitionEnsemble(partitions, extensions, provenance)


def incidence_partitions(
    incidence: Any,
    m: int,
    seed: int = 0,
    axis: int = 0,
) -> PartitionEnsemble:
    """
    Present/absent partitions from a 0/1 incidence matrix (users x movies,
    documents x words, ...).

    Args:
        incidence: Items x features matrix
        m: Number of samples
        seed: Ensemble seed
        axis: 0 clusters the rows by a random column; 1 clusters the columns
            by a random row

    Returns:
        PartitionEnsemble
    """
    table = np.asarray(incidence)
    if table.ndim != 2:
        raise DimensionError(f"Incidence matrix must be 2-D, got shape {table.shape}")
    if axis not in (0, 1):
        raise ParameterError(f"axis must be 0 or 1, got {axis}")
    table = table if axis == 0 else table.T
    columns = [(table[:, j] != 0).astype(np.int64) for j in range(table.shape[1])]
    ensemble = categorical_partitions(columns, m, seed)
    ensemble.provenance.update({"kind": "incidence", "axis": axis})
    return ensemble


# ============================================================================
# Ensemble generation
# ============================================================================

def sample_ensemble(
    spec: SamplerSpec,
    m: int,
    X: Optional[Any] = None,
    y: Optional[Any] = None,
    columns: Optional[Sequence[Any]] = None,
    n_jobs: int = 1,
) -> PartitionEnsemble:
    """
    Draw m independent partitions, sample i using stream i of ``spec.seed``.

    Args:
        spec: Sampler kind, hyper-parameters and seed
        m: Number of samples
        X: Feature matrix (rf, fastcluster)
        y: Targets (rf)
        columns: Categorical columns (categorical)
        n_jobs: Parallel workers; output order is always the sample index

    Returns:
        PartitionEnsemble with extension handles
    """
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")

    if spec.kind == "categorical":
        if columns is None:
            raise ParameterError("The categorical sampler needs categorical columns")
        return categorical_partitions(columns, m, spec.seed)

    if X is None:
        raise ParameterError(f"The {spec.kind} sampler needs a feature matrix")
    X = np.asarray(X, dtype=np.float64)
    if spec.kind == "rf":
        if y is None:
            raise ParameterError("The rf sampler needs regression targets")
        y = np.asarray(y, dtype=np.float64)
        draw, args = _draw_rf, (X, y, spec.tree)
    else:
        draw, args = _draw_fast_cluster, (X, spec.fast_cluster)

    logger.info(f"Sampling {m} {spec.kind} partitions of N={X.shape[0]} points (seed={spec.seed})")
    samples = Parallel(n_jobs=n_jobs)(
        delayed(draw)(*args, SamplerSeed(spec.seed, i)) for i in range(m)
    )
    partitions = [p for p, _ in samples]
    extensions = [e for _, e in samples]
    provenance = {"sampler": spec.model_dump(mode="json"), "m": int(m), "n": int(X.shape[0])}
    mean_clusters = float(np.mean([p.n_clusters for p in partitions]))
    logger.info(f"Sampled ensemble: m={m}, mean clusters per partition {mean_clusters:.1f}")
    return PartitionEnsemble(partitions, extensions, provenance)
