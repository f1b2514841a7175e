"""
Dense closed-form kernels used as comparison baselines.

Hyper-parameters are picked from a fixed log-spaced grid by training
log marginal likelihood; there is no gradient-based optimizer.
"""

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError
from scipy.spatial.distance import cdist, pdist

from core.errors import DataError, ParameterError, ResourceError
from core.gram import DEFAULT_DENSE_CAP
from core.models import CholeskySolver, DenseKernel

logger = logging.getLogger(__name__)

# Grid: lengthscale factors (x median pairwise distance) x amplitude x noise
LENGTHSCALE_FACTORS = tuple(np.logspace(-1, 1, 5))
AMPLITUDES = tuple(np.logspace(-1, 1, 3))
NOISES = tuple(np.logspace(-3, 0, 5))
_MEDIAN_ROWS = 1000


def _check_cap(n: int, cap: int) -> None:
    if n > cap:
        raise ResourceError(f"Dense baseline Gram of N={n} exceeds the cap of {cap}")


def rbf_kernel(A: np.ndarray, B: np.ndarray, lengthscale: float, amplitude: float) -> np.ndarray:
    """amplitude * exp(-||a - b||^2 / (2 lengthscale^2))"""
    sq = cdist(np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64), "sqeuclidean")
    return amplitude * np.exp(-sq / (2.0 * lengthscale ** 2))


def linear_kernel(A: np.ndarray, B: np.ndarray, amplitude: float = 1.0) -> np.ndarray:
    return amplitude * (np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64).T)


def rbf_baseline_gram(
    X: np.ndarray, lengthscale: float, amplitude: float = 1.0, cap: int = DEFAULT_DENSE_CAP
) -> np.ndarray:
    """Dense RBF Gram matrix (guarded by the dense cap)."""
    if not lengthscale > 0 or not amplitude > 0:
        raise ParameterError("RBF lengthscale and amplitude must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_cap(X.shape[0], cap)
    return rbf_kernel(X, X, lengthscale, amplitude)


def linear_baseline_gram(X: np.ndarray, amplitude: float = 1.0, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Dense linear Gram matrix (guarded by the dense cap)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_cap(X.shape[0], cap)
    return linear_kernel(X, X, amplitude)


def median_distance(X: np.ndarray) -> float:
    """Median pairwise distance over (at most) the first rows of X."""
    sample = np.asarray(X, dtype=np.float64)[:_MEDIAN_ROWS]
    if sample.shape[0] < 2:
        return 1.0
    dist = pdist(sample)
    med = float(np.median(dist[dist > 0])) if np.any(dist > 0) else 1.0
    return med


def log_marginal_likelihood(K: np.ndarray, y: np.ndarray, noise: float) -> float:
    """log N(y; 0, K + noise I) via Cholesky."""
    solver = CholeskySolver(K, noise)
    alpha, _ = solver.solve(y)
    n = y.size
    return float(-0.5 * y @ alpha - 0.5 * solver.log_det() - 0.5 * n * math.log(2.0 * math.pi))


@dataclass
class BaselineChoice:
    kernel: DenseKernel
    noise: float
    score: float
    grid_scores: List[Dict[str, float]]


def make_dense_kernel(kind: str, X_train: np.ndarray, params: Dict[str, float]) -> DenseKernel:
    """DenseKernel for an 'rbf' or 'linear' baseline with fixed hyper-parameters."""
    amplitude = params["amplitude"]
    if kind == "rbf":
        fn = partial(rbf_kernel, lengthscale=params["lengthscale"], amplitude=amplitude)

        def diag(A: np.ndarray) -> np.ndarray:
            return np.full(np.asarray(A).shape[0], amplitude)
    elif kind == "linear":
        fn = partial(linear_kernel, amplitude=amplitude)

        def diag(A: np.ndarray) -> np.ndarray:
            return amplitude * np.einsum("ij,ij->i", A, A)
    else:
        raise ParameterError(f"Unknown baseline kernel '{kind}'")
    return DenseKernel(kind, X_train, fn, diag, params)


def select_baseline(
    kind: str,
    X: np.ndarray,
    y: np.ndarray,
    cap: int = DEFAULT_DENSE_CAP,
    lengthscale_factors: Sequence[float] = LENGTHSCALE_FACTORS,
    amplitudes: Sequence[float] = AMPLITUDES,
    noises: Sequence[float] = NOISES,
) -> BaselineChoice:
    """
    Pick baseline hyper-parameters on the fixed grid by training log marginal
    likelihood of the standardized targets.

    Args:
        kind: 'rbf' or 'linear' (linear ignores the lengthscale axis)
        X: Training inputs
        y: Training targets (standardized here)
        cap: Dense cap

    Returns:
        BaselineChoice with the winning kernel and noise
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    _check_cap(X.shape[0], cap)
    scale = float(y.std()) or 1.0
    y_std = (y - y.mean()) / scale

    if kind == "rbf":
        base = median_distance(X)
        settings = [
            {"lengthscale": base * f, "amplitude": a}
            for f in lengthscale_factors for a in amplitudes
        ]
    elif kind == "linear":
        settings = [{"amplitude": a} for a in amplitudes]
    else:
        raise ParameterError(f"Unknown baseline kernel '{kind}'")

    scores: List[Dict[str, float]] = []
    best: Optional[Tuple[float, Dict[str, float], float]] = None
    for params in settings:
        K = make_dense_kernel(kind, X, params).K
        for noise in noises:
            try:
                score = log_marginal_likelihood(K, y_std, noise)
            except LinAlgError:
                continue
            scores.append({**params, "noise": float(noise), "log_marginal_likelihood": score})
            if best is None or score > best[0]:
                best = (score, params, float(noise))

    if best is None:
        raise DataError(f"No {kind} grid point produced a positive definite system")
    score, params, noise = best
    logger.info(f"Selected {kind} baseline {params} noise={noise:.3g} (train LML {score:.2f})")
    return BaselineChoice(make_dense_kernel(kind, X, params), noise, score, scores)
