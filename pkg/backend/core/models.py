"""
Kernel machines on top of the operator stack.

GP regression and Kernel PCA talk to a kernel through a small interface
(train products, a solver for K + noise I, and a cross kernel for test
points). Partition kernels implement it matrix-free; the dense baselines
implement it with explicit matrices. Prediction and evaluation code is
shared by both.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from app.schemas import SolveReport, SolverOptions
from core.errors import DimensionError, ParameterError, SolverError
from core.gram import DEFAULT_DENSE_CAP, GramOperator
from core.linalg import LinearOperatorHandle, cg_solve, cg_solve_batch, gram_handle, power_topk
from core.partitions import ExtendedPartition, PartitionEnsemble, cross_matvec, cross_rows

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
PREDICT_BATCH = 64


# ============================================================================
# Kernel sources
# ============================================================================

class PartitionCross:
    """Matrix-free test x train kernel of a partition ensemble."""

    def __init__(self, pairing: Sequence[ExtendedPartition]):
        self.pairing = list(pairing)

    @property
    def n_test(self) -> int:
        return self.pairing[0].n_test

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return cross_matvec(self.pairing, v)

    def rows(self, index: np.ndarray) -> np.ndarray:
        return cross_rows(self.pairing, index)

    def diag(self) -> np.ndarray:
        # k(x, x) = 1 for every partition kernel
        return np.ones(self.n_test)


class DenseCross:
    """Explicit test x train kernel matrix."""

    def __init__(self, K_cross: np.ndarray, diag: np.ndarray):
        self.K = np.asarray(K_cross, dtype=np.float64)
        self._diag = np.asarray(diag, dtype=np.float64)

    @property
    def n_test(self) -> int:
        return self.K.shape[0]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.K @ v

    def rows(self, index: np.ndarray) -> np.ndarray:
        return self.K[index]

    def diag(self) -> np.ndarray:
        return self._diag


class IterativeSolver:
    """PCG solves against K + noise I for a partition kernel."""

    def __init__(self, operator: GramOperator, options: SolverOptions):
        self.operator = operator
        self.options = options
        self.handle = gram_handle(operator, preconditioned=options.use_preconditioner)

    def solve(self, rhs: np.ndarray, x0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolveReport]:
        return cg_solve(self.handle, rhs, self.options.tol, self.options.max_iter, x0=x0)

    def solve_batch(self, rhs: np.ndarray) -> Tuple[np.ndarray, SolveReport]:
        # warm start from the preconditioner's approximate inverse
        x0 = self.handle.precond(rhs) if self.handle.precond is not None else None
        return cg_solve_batch(self.handle, rhs, self.options.tol, self.options.max_iter, X0=x0)


class CholeskySolver:
    """Dense Cholesky solves against K + noise I (baselines and oracles)."""

    def __init__(self, K: np.ndarray, noise: float):
        A = np.array(K, dtype=np.float64)
        A[np.diag_indices_from(A)] += noise
        self.factor = cho_factor(A, lower=True)

    def _report(self) -> SolveReport:
        return SolveReport(converged=True, message="dense Cholesky")

    def solve(self, rhs: np.ndarray, x0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolveReport]:
        return cho_solve(self.factor, rhs), self._report()

    def solve_batch(self, rhs: np.ndarray) -> Tuple[np.ndarray, SolveReport]:
        return cho_solve(self.factor, rhs), self._report()

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor[0]))))


class PartitionKernel:
    """
    Kernel source backed by a PartitionEnsemble.

    Args:
        ensemble: Partition samples (with extension handles for prediction)
        precond_sigma: Preconditioner shift; defaults to the GP noise
        n_jobs: Worker threads for operator products
        dense_cap: Cap for dense materialization
    """

    name = "partition"

    def __init__(
        self,
        ensemble: PartitionEnsemble,
        precond_sigma: Optional[float] = None,
        n_jobs: int = 1,
        dense_cap: int = DEFAULT_DENSE_CAP,
    ):
        self.ensemble = ensemble
        self.precond_sigma = precond_sigma
        self.n_jobs = n_jobs
        self.dense_cap = dense_cap
        self.gram = GramOperator(ensemble, 0.0, precond_sigma, n_jobs, dense_cap)

    @property
    def n(self) -> int:
        return self.ensemble.n

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.gram.matvec(v)

    def row_means(self) -> np.ndarray:
        return self.gram.row_means()

    def solver(self, noise: float, options: SolverOptions) -> IterativeSolver:
        return IterativeSolver(self.gram.with_jitter(noise), options)

    def cross(self, test: Any) -> PartitionCross:
        """Cross kernel from extended partitions or raw test rows."""
        if isinstance(test, PartitionCross):
            return test
        if isinstance(test, (list, tuple)) and test and isinstance(test[0], ExtendedPartition):
            pairing = list(test)
        else:
            pairing = self.ensemble.extend(test)
        if len(pairing) != self.ensemble.m:
            raise DimensionError(f"Expected {self.ensemble.m} extended partitions, got {len(pairing)}")
        return PartitionCross(pairing)

    def dense(self) -> np.ndarray:
        return self.gram.dense(include_jitter=False)


class DenseKernel:
    """
    Kernel source backed by explicit matrices from a closed-form kernel function.

    Args:
        name: Label used in result tables
        X_train: Training inputs
        kernel_fn: (A, B) -> Gram block between row sets
        diag_fn: A -> k(x, x) for each row
        hyperparameters: Recorded alongside results
    """

    def __init__(self, name: str, X_train: np.ndarray, kernel_fn, diag_fn, hyperparameters: Dict[str, float]):
        self.name = name
        self.X_train = np.asarray(X_train, dtype=np.float64)
        self.kernel_fn = kernel_fn
        self.diag_fn = diag_fn
        self.hyperparameters = dict(hyperparameters)
        self.K = kernel_fn(self.X_train, self.X_train)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.K @ v

    def row_means(self) -> np.ndarray:
        return self.K.mean(axis=1)

    def solver(self, noise: float, options: Optional[SolverOptions] = None) -> CholeskySolver:
        return CholeskySolver(self.K, noise)

    def cross(self, test: Any) -> DenseCross:
        if isinstance(test, DenseCross):
            return test
        X_test = np.asarray(test, dtype=np.float64)
        if X_test.ndim != 2 or X_test.shape[1] != self.X_train.shape[1]:
            raise DimensionError(f"Test rows must have {self.X_train.shape[1]} features, got {X_test.shape}")
        return DenseCross(self.kernel_fn(X_test, self.X_train), self.diag_fn(X_test))

    def dense(self) -> np.ndarray:
        return self.K


KernelSource = Union[PartitionKernel, DenseKernel]


# ============================================================================
# GP regression
# ============================================================================

@dataclass
class Prediction:
    mean: np.ndarray
    variance: np.ndarray
    n_clamped: int = 0
    report: Optional[SolveReport] = None


@dataclass
class EvalMetrics:
    """Test metrics on the original target scale; log-likelihood is the per-point mean."""
    mse: float
    log_likelihood: float
    mean: np.ndarray
    variance: np.ndarray
    n_clamped: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


class GPRegressor:
    """
    GP regression with a fixed kernel source.

    After ``fit``: ``alpha`` solves (K + noise I) alpha = y on the
    standardized targets and ``report`` holds the solve diagnostics.
    """

    def __init__(
        self,
        kernel: KernelSource,
        noise: float = 1e-2,
        options: Optional[SolverOptions] = None,
        standardize_targets: bool = True,
    ):
        if not noise > 0:
            raise ParameterError(f"Noise variance must be positive, got {noise}")
        self.kernel = kernel
        self.noise = float(noise)
        self.options = options or SolverOptions()
        self.standardize_targets = standardize_targets
        self.y_mean = 0.0
        self.y_scale = 1.0
        self.alpha: Optional[np.ndarray] = None
        self.report: Optional[SolveReport] = None
        self._solver = None

    def fit(self, y: Any) -> "GPRegressor":
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != self.kernel.n:
            raise DimensionError(f"Kernel covers N={self.kernel.n} points, got {y.size} targets")
        if self.standardize_targets:
            self.y_mean = float(y.mean())
            scale = float(y.std())
            self.y_scale = scale if scale > 0 else 1.0
        y_std = (y - self.y_mean) / self.y_scale

        self._solver = self.kernel.solver(self.noise, self.options)
        alpha, report = self._solver.solve(y_std)
        self.report = report
        if not report.converged:
            logger.error(f"GP fit did not converge: {report.message}")
            raise SolverError(f"GP fit did not converge: {report.message}", report)
        self.alpha = alpha
        logger.info(f"GP fit on N={y.size}: {report.iterations} iterations, residual {report.residual_norm:.2e}")
        return self

    def predict(self, test: Any) -> Prediction:
        if self.alpha is None:
            raise ParameterError("GPRegressor.predict called before fit")
        cross = self.kernel.cross(test)
        mean_std = cross.matvec(self.alpha)

        prior = cross.diag() + self.noise
        quad = np.empty(cross.n_test)
        worst = SolveReport(converged=True)
        for start in range(0, cross.n_test, PREDICT_BATCH):
            index = np.arange(start, min(start + PREDICT_BATCH, cross.n_test))
            K_star = cross.rows(index)
            solved, report = self._solver.solve_batch(K_star.T)
            if not report.converged:
                raise SolverError(f"Predictive variance solve did not converge: {report.message}", report)
            worst.iterations = max(worst.iterations, report.iterations)
            worst.residual_norm = max(worst.residual_norm, report.residual_norm)
            quad[index] = np.einsum("ij,ji->i", K_star, solved)

        var_std = prior - quad
        clamped = var_std < VARIANCE_FLOOR
        n_clamped = int(clamped.sum())
        if n_clamped:
            logger.warning(f"{n_clamped} predictive variances were numerically non-positive and clamped")
            var_std = np.where(clamped, VARIANCE_FLOOR, var_std)

        mean = self.y_mean + self.y_scale * mean_std
        variance = self.y_scale ** 2 * var_std
        return Prediction(mean, variance, n_clamped, worst)


def gp_fit(
    ensemble: PartitionEnsemble,
    y: Any,
    noise: float = 1e-2,
    options: Optional[SolverOptions] = None,
    precond_sigma: Optional[float] = None,
    standardize_targets: bool = True,
    n_jobs: int = 1,
) -> GPRegressor:
    """
    Fit a GP with the ensemble's partition kernel.

    alpha = (K + noise I)^{-1} y is computed by PCG with the partition
    preconditioner (shift ``precond_sigma``, default ``noise``).
    """
    kernel = PartitionKernel(ensemble, precond_sigma, n_jobs)
    return GPRegressor(kernel, noise, options, standardize_targets).fit(y)


def gp_predict(model: GPRegressor, test: Any) -> Prediction:
    """Predictive mean and variance for test rows (or their extended partitions)."""
    return model.predict(test)


def log_likelihood_terms(y: np.ndarray, mean: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Per-point univariate Gaussian log densities."""
    return -0.5 * np.log(2.0 * math.pi * variance) - 0.5 * (y - mean) ** 2 / variance


def gp_evaluate(model: GPRegressor, test: Any, y_test: Any) -> EvalMetrics:
    """Test MSE and mean log-likelihood on the original target scale."""
    y_test = np.asarray(y_test, dtype=np.float64).reshape(-1)
    pred = model.predict(test)
    if pred.mean.size != y_test.size:
        raise DimensionError(f"{pred.mean.size} predictions for {y_test.size} targets")
    mse = float(np.mean((y_test - pred.mean) ** 2))
    ll = float(np.mean(log_likelihood_terms(y_test, pred.mean, pred.variance)))
    return EvalMetrics(mse, ll, pred.mean, pred.variance, pred.n_clamped)


# ============================================================================
# Kernel PCA
# ============================================================================

@dataclass
class KPCAModel:
    """
    Top-k eigenpairs of the doubly centered Gram matrix H K H.

    ``row_means`` and ``grand_mean`` are the centering statistics of the
    training Gram matrix, reused to center test kernel rows.
    """
    kernel: KernelSource
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    row_means: np.ndarray
    grand_mean: float
    report: Optional[SolveReport] = None

    @property
    def k(self) -> int:
        return int(self.eigenvalues.size)

    def _inv_sqrt(self) -> np.ndarray:
        lam = self.eigenvalues
        scale = max(float(lam.max(initial=0.0)), 1.0)
        safe = lam > 1e-12 * scale
        return np.where(safe, 1.0 / np.sqrt(np.where(safe, lam, 1.0)), 0.0)

    def training_coordinates(self) -> np.ndarray:
        return self.eigenvectors * np.sqrt(self.eigenvalues)

    def project(self, test: Any) -> np.ndarray:
        cross = self.kernel.cross(test)
        V = self.eigenvectors
        n = V.shape[0]
        colsum = V.sum(axis=0)
        kx_V = cross.matvec(V)
        kx_mean = cross.matvec(np.ones(n)) / n
        centered = kx_V - np.outer(kx_mean, colsum) - (self.row_means @ V) + self.grand_mean * colsum
        return centered * self._inv_sqrt()


def centered_handle(kernel: KernelSource) -> LinearOperatorHandle:
    """H K H as an operator: centering passes around one kernel product."""
    def matvec(v: np.ndarray) -> np.ndarray:
        w = kernel.matvec(v - v.mean(axis=0))
        return w - w.mean(axis=0)
    return LinearOperatorHandle(kernel.n, matvec)


def kpca_fit(
    ensemble: Union[PartitionEnsemble, PartitionKernel],
    k: int,
    tol: float = 1e-8,
    max_iter: int = 5000,
    seed: int = 0,
    n_jobs: int = 1,
) -> KPCAModel:
    """
    Kernel PCA with a partition kernel, never materializing K.

    Eigenpairs of H K H come from power iteration on the implicitly
    centered operator.
    """
    kernel = ensemble if isinstance(ensemble, PartitionKernel) else PartitionKernel(ensemble, n_jobs=n_jobs)
    if not 1 <= k <= kernel.n:
        raise ParameterError(f"k must lie in [1, {kernel.n}], got {k}")
    values, vectors, report = power_topk(centered_handle(kernel), k, tol=tol, max_iter=max_iter, seed=seed)
    if not report.converged:
        logger.warning(f"KPCA eigenpairs not fully converged: {report.message}")
    values = np.maximum(values, 0.0)
    row_means = kernel.row_means()
    logger.info(f"KPCA on N={kernel.n}: top eigenvalues {np.round(values[:3], 4).tolist()}")
    return KPCAModel(kernel, values, vectors, row_means, float(row_means.mean()), report)


def kpca_fit_dense(kernel: DenseKernel, k: int) -> KPCAModel:
    """Kernel PCA by dense eigendecomposition (baselines; O(N^3))."""
    n = kernel.n
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    K = kernel.dense()
    row_means = K.mean(axis=1)
    grand = float(row_means.mean())
    Kc = K - row_means[:, None] - row_means[None, :] + grand
    values, vectors = eigh(0.5 * (Kc + Kc.T), subset_by_index=[n - k, n - 1])
    order = np.argsort(values)[::-1]
    values = np.maximum(values[order], 0.0)
    return KPCAModel(kernel, values, vectors[:, order], row_means, grand, SolveReport(converged=True, message="dense eigh"))


def kpca_project(model: KPCAModel, test: Any) -> np.ndarray:
    """M x k coordinates of test points (kernel PCA out-of-sample projection)."""
    return model.project(test)


def kernel_entry_variance(
    draw_ensemble,
    pair: Tuple[int, int],
    m: int,
    trials: int,
) -> Tuple[float, float]:
    """
    Spread of the m-approximate kernel entry k(a, b) over independent ensembles.

    Args:
        draw_ensemble: (m, trial) -> PartitionEnsemble
        pair: Point indices (a, b)
        m: Partitions per ensemble
        trials: Independent ensembles

    Returns:
        (mean estimate, empirical variance)
    """
    a, b = pair
    estimates: List[float] = []
    for t in range(trials):
        ens = draw_ensemble(m, t)
        hits = sum(int(p.assignments[a] == p.assignments[b]) for p in ens.partitions)
        estimates.append(hits / ens.m)
    values = np.array(estimates)
    return float(values.mean()), float(values.var())
