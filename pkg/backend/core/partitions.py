"""
Partition and ensemble data model.
Implements the O(N) per-partition products that the Gram operator is built on.
"""

import logging
from functools import cached_property
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DataError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

LABEL_DTYPE = np.int64


def as_vector(v: Any, n: int) -> np.ndarray:
    """Validate a right-hand side of length n (1-D, or 2-D with n rows)."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[0] != n:
        raise DimensionError(f"Expected vector of length {n}, got shape {arr.shape}")
    return arr


def _cluster_sums(labels: np.ndarray, v: np.ndarray, n_clusters: int) -> np.ndarray:
    """Scatter-add v into per-cluster sums (single pass over the points)."""
    if v.ndim == 1:
        return np.bincount(labels, weights=v, minlength=n_clusters)
    width = v.shape[1]
    flat = (labels[:, None] * width + np.arange(width)).ravel()
    sums = np.bincount(flat, weights=v.ravel(), minlength=n_clusters * width)
    return sums.reshape(n_clusters, width)


class Partition:
    """
    Assignment of N point indices to contiguous cluster labels 0..n_clusters-1.

    Instances are immutable: the label array is copied and marked read-only.
    """

    def __init__(self, assignments: Any):
        labels = np.array(assignments, dtype=LABEL_DTYPE, copy=True).reshape(-1)
        if labels.size == 0:
            raise DataError("A partition needs at least one point")
        if labels.min() < 0:
            raise DataError("Cluster labels must be non-negative")
        n_clusters = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=n_clusters)
        if np.any(counts == 0):
            raise DataError("Cluster labels must be contiguous 0..n_clusters-1 with no empty cluster")
        labels.setflags(write=False)
        self._assignments = labels
        self._n_clusters = n_clusters

    @classmethod
    def from_labels(cls, raw_labels: Any) -> Tuple["Partition", np.ndarray]:
        """
        Build a partition from arbitrary integer labels (e.g. tree node ids).

        Args:
            raw_labels: Length-N labels, any integer values

        Returns:
            (partition, keys) where keys[c] is the raw label of cluster c
        """
        raw = np.asarray(raw_labels).reshape(-1)
        keys, inverse = np.unique(raw, return_inverse=True)
        return cls(inverse), keys

    @property
    def assignments(self) -> np.ndarray:
        return self._assignments

    @property
    def n(self) -> int:
        return int(self._assignments.size)

    @property
    def n_clusters(self) -> int:
        return self._n_clusters

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self._assignments, minlength=self._n_clusters)

    @cached_property
    def cluster_index(self) -> List[np.ndarray]:
        """Member point indices of each cluster, in ascending order."""
        order = np.argsort(self._assignments, kind="stable")
        bounds = np.cumsum(self.cluster_sizes)[:-1]
        return np.split(order, bounds)

    def co_membership(self) -> np.ndarray:
        """Dense 0/1 partition matrix K_rho (desk-scale helper)."""
        a = self._assignments
        return (a[:, None] == a[None, :]).astype(np.float64)

    def refines(self, other: "Partition") -> bool:
        """True when every cluster of self lies inside one cluster of other."""
        if other.n != self.n:
            raise DimensionError("Partitions cover different point sets")
        parent = np.full(self._n_clusters, -1, dtype=LABEL_DTYPE)
        parent[self._assignments] = other.assignments
        return bool(np.array_equal(parent[self._assignments], other.assignments))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        return np.array_equal(self._assignments, other._assignments)

    def __hash__(self) -> int:
        return hash(self._assignments.tobytes())

    def __repr__(self) -> str:
        return f"Partition(n={self.n}, n_clusters={self._n_clusters})"


class ExtendedPartition:
    """
    A training partition paired with test-point labels in the same label space.

    Test label -1 marks a test point whose cluster holds no training points.
    """

    def __init__(self, partition: Partition, test_labels: Any):
        labels = np.array(test_labels, dtype=LABEL_DTYPE, copy=True).reshape(-1)
        if labels.size and (labels.min() < -1 or labels.max() >= partition.n_clusters):
            raise DataError(
                f"Test labels outside the training label space [-1, {partition.n_clusters - 1}]"
            )
        labels.setflags(write=False)
        self.partition = partition
        self.test_labels = labels

    @property
    def n_test(self) -> int:
        return int(self.test_labels.size)


class PartitionEnsemble:
    """
    m partitions of the same N points; implicitly the m-approximate Gram matrix.

    Args:
        partitions: The sampled partitions
        extensions: Optional out-of-sample handles, one per partition; each has
            ``assign(X_test) -> labels`` in its partition's label space
        provenance: Sampler description stored alongside serialized files
    """

    def __init__(
        self,
        partitions: Sequence[Partition],
        extensions: Optional[Sequence[Any]] = None,
        provenance: Optional[dict] = None,
    ):
        partitions = list(partitions)
        if not partitions:
            raise ParameterError("An ensemble needs m >= 1 partitions")
        n = partitions[0].n
        if any(p.n != n for p in partitions):
            raise DimensionError("All partitions of an ensemble must cover the same N points")
        if extensions is not None and len(extensions) != len(partitions):
            raise DataError("One extension handle per partition is required")
        self.partitions = partitions
        self.extensions = list(extensions) if extensions is not None else None
        self.provenance = dict(provenance or {})

    @property
    def m(self) -> int:
        return len(self.partitions)

    @property
    def n(self) -> int:
        return self.partitions[0].n

    def subset(self, m: int) -> "PartitionEnsemble":
        """The first m partitions (m-sweeps reuse one large ensemble)."""
        if not 1 <= m <= self.m:
            raise ParameterError(f"m must lie in [1, {self.m}], got {m}")
        ext = self.extensions[:m] if self.extensions is not None else None
        return PartitionEnsemble(self.partitions[:m], ext, {**self.provenance, "m": m})

    def extend(self, X_test: Any) -> List[ExtendedPartition]:
        """Assign test rows to every partition's clusters via the stored extension handles."""
        if self.extensions is None:
            raise DataError("Ensemble carries no out-of-sample extension handles")
        return [
            ExtendedPartition(p, ext.assign(X_test))
            for p, ext in zip(self.partitions, self.extensions)
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PartitionEnsemble):
            return NotImplemented
        return self.m == other.m and all(a == b for a, b in zip(self.partitions, other.partitions))

    def __repr__(self) -> str:
        return f"PartitionEnsemble(m={self.m}, n={self.n})"


def partition_matvec(p: Partition, v: Any) -> np.ndarray:
    """
    Multiply the partition matrix K_rho by v in O(N).

    Args:
        p: Partition
        v: Vector of length N (or N x B block of vectors)

    Returns:
        (K_rho v)_i = sum of v over the cluster of i
    """
    v = as_vector(v, p.n)
    sums = _cluster_sums(p.assignments, v, p.n_clusters)
    return sums[p.assignments]


def partition_block_solve(p: Partition, sigma: float, v: Any) -> np.ndarray:
    """
    Solve (K_rho + sigma I) x = v exactly in O(N).

    Each cluster block is J + sigma I, whose inverse is (I - J / (|c| + sigma)) / sigma.

    Args:
        p: Partition
        sigma: Positive diagonal shift
        v: Right-hand side of length N (or N x B)

    Returns:
        Solution x
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    v = as_vector(v, p.n)
    sums = _cluster_sums(p.assignments, v, p.n_clusters)
    denom = p.cluster_sizes.astype(np.float64) + sigma
    if v.ndim == 1:
        scaled = sums / denom
    else:
        scaled = sums / denom[:, None]
    return (v - scaled[p.assignments]) / sigma


def cross_matvec(pairing: Sequence[ExtendedPartition], v: Any) -> np.ndarray:
    """
    Multiply the test-by-train cross kernel by v without forming it.

    Args:
        pairing: One extended partition per ensemble member
        v: Vector over the training points (or N_train x B)

    Returns:
        Length-N_test vector: (1/m) sum over partitions of the training mass
        in each test point's cluster
    """
    if not pairing:
        raise ParameterError("cross_matvec needs at least one extended partition")
    n_train = pairing[0].partition.n
    n_test = pairing[0].n_test
    v = as_vector(v, n_train)
    out_shape = (n_test,) if v.ndim == 1 else (n_test, v.shape[1])
    total = np.zeros(out_shape, dtype=np.float64)
    for ext in pairing:
        if ext.partition.n != n_train or ext.n_test != n_test:
            raise DataError("Extended partitions disagree on train/test sizes")
        sums = _cluster_sums(ext.partition.assignments, v, ext.partition.n_clusters)
        # -1 labels index a trailing zero row
        padded = np.concatenate([sums, np.zeros((1,) + sums.shape[1:])], axis=0)
        total += padded[ext.test_labels]
    return total / len(pairing)


def cross_dense(pairing: Sequence[ExtendedPartition]) -> np.ndarray:
    """Dense N_test x N_train cross kernel (oracle / desk-scale helper)."""
    n_train = pairing[0].partition.n
    n_test = pairing[0].n_test
    K = np.zeros((n_test, n_train), dtype=np.float64)
    for ext in pairing:
        K += ext.test_labels[:, None] == ext.partition.assignments[None, :]
    return K / len(pairing)


def cross_rows(pairing: Sequence[ExtendedPartition], test_index: np.ndarray) -> np.ndarray:
    """Cross-kernel rows for a batch of test points, shape (len(test_index), N_train)."""
    n_train = pairing[0].partition.n
    rows = np.zeros((len(test_index), n_train), dtype=np.float64)
    for ext in pairing:
        rows += ext.test_labels[test_index][:, None] == ext.partition.assignments[None, :]
    return rows / len(pairing)
