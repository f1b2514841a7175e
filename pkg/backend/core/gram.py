"""
Matrix-free Gram operator over a partition ensemble.

The represented matrix is (1/m) sum_rho K_rho + jitter * I. Products cost
O(mN); the dense form is only built for desk-scale checks.
"""

import logging
from typing import Any, Callable, List, Optional

import numpy as np
from joblib import Parallel, delayed

from core.errors import ParameterError, ResourceError
from core.partitions import (
    Partition,
    PartitionEnsemble,
    as_vector,
    partition_block_solve,
    partition_matvec,
)

logger = logging.getLogger(__name__)

# Partitions are summed in fixed blocks of this size, then the block sums in
# index order, so results are bitwise identical for any thread count.
REDUCTION_BLOCK = 16

DEFAULT_DENSE_CAP = 10_000


def _block_sum(
    fn: Callable[[Partition, np.ndarray], np.ndarray],
    partitions: List[Partition],
    v: np.ndarray,
) -> np.ndarray:
    total = fn(partitions[0], v)
    for p in partitions[1:]:
        total = total + fn(p, v)
    return total


class GramOperator:
    """
    Linear operator view of a PartitionEnsemble.

    Args:
        ensemble: Partition samples
        jitter: Non-negative diagonal term (GP noise variance)
        precond_sigma: Shift used inside the preconditioner blocks;
            defaults to ``jitter``
        n_jobs: Worker threads for the per-partition products
        dense_cap: Largest N for which ``dense()`` may materialize the matrix
    """

    def __init__(
        self,
        ensemble: PartitionEnsemble,
        jitter: float = 0.0,
        precond_sigma: Optional[float] = None,
        n_jobs: int = 1,
        dense_cap: int = DEFAULT_DENSE_CAP,
    ):
        if jitter < 0:
            raise ParameterError(f"jitter must be non-negative, got {jitter}")
        if precond_sigma is not None and precond_sigma <= 0:
            raise ParameterError(f"precond_sigma must be positive, got {precond_sigma}")
        self.ensemble = ensemble
        self.jitter = float(jitter)
        self.precond_sigma = float(precond_sigma) if precond_sigma is not None else None
        self.n_jobs = max(1, int(n_jobs))
        self.dense_cap = int(dense_cap)

    @property
    def n(self) -> int:
        return self.ensemble.n

    @property
    def m(self) -> int:
        return self.ensemble.m

    def with_jitter(self, jitter: float) -> "GramOperator":
        return GramOperator(self.ensemble, jitter, self.precond_sigma, self.n_jobs, self.dense_cap)

    def _reduce(self, fn: Callable[[Partition, np.ndarray], np.ndarray], v: np.ndarray) -> np.ndarray:
        parts = self.ensemble.partitions
        blocks = [parts[i:i + REDUCTION_BLOCK] for i in range(0, len(parts), REDUCTION_BLOCK)]
        if self.n_jobs > 1 and len(blocks) > 1:
            partial = Parallel(n_jobs=self.n_jobs, prefer="threads")(
                delayed(_block_sum)(fn, block, v) for block in blocks
            )
        else:
            partial = [_block_sum(fn, block, v) for block in blocks]
        total = partial[0]
        for block_total in partial[1:]:
            total = total + block_total
        return total / self.m

    def matvec(self, v: Any) -> np.ndarray:
        v = as_vector(v, self.n)
        out = self._reduce(partition_matvec, v)
        if self.jitter:
            out = out + self.jitter * v
        return out

    def precond_matvec(self, v: Any) -> np.ndarray:
        sigma = self.precond_sigma if self.precond_sigma is not None else self.jitter
        if not sigma > 0:
            raise ParameterError("The preconditioner needs a positive sigma (jitter > 0)")
        v = as_vector(v, self.n)
        return self._reduce(lambda p, x: partition_block_solve(p, sigma, x), v)

    def dense(self, include_jitter: bool = True) -> np.ndarray:
        n = self.n
        if n > self.dense_cap:
            raise ResourceError(f"Dense Gram of N={n} exceeds the cap of {self.dense_cap}")
        K = np.zeros((n, n), dtype=np.float64)
        for p in self.ensemble.partitions:
            a = p.assignments
            K += a[:, None] == a[None, :]
        K /= self.m
        if include_jitter and self.jitter:
            K[np.diag_indices(n)] += self.jitter
        return K

    def row_means(self) -> np.ndarray:
        """Row means of the jitter-free Gram matrix, one O(mN) product."""
        return self._reduce(partition_matvec, np.ones(self.n)) / self.n

    def __repr__(self) -> str:
        return f"GramOperator(m={self.m}, n={self.n}, jitter={self.jitter})"


def gram_matvec(g: GramOperator, v: Any) -> np.ndarray:
    """(1/m) sum_rho K_rho v + jitter * v."""
    return g.matvec(v)


def precond_matvec(g: GramOperator, v: Any) -> np.ndarray:
    """(1/m) sum_rho (K_rho + sigma I)^{-1} v."""
    return g.precond_matvec(v)


def gram_dense(g: GramOperator) -> np.ndarray:
    """Materialize the represented matrix (guarded by ``g.dense_cap``)."""
    return g.dense()
