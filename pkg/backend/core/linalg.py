"""
Matrix-free iterative solvers.

Only operator-vector products are required: (preconditioned) conjugate
gradient for SPD systems, power / block power iteration for the top
eigenpairs, and a condition number estimate built from both.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.schemas import SolveReport
from core.errors import NumericalBreakdownError, ParameterError
from core.gram import GramOperator

logger = logging.getLogger(__name__)

Matvec = Callable[[np.ndarray], np.ndarray]

# Block iteration replaces sequential deflation above this many eigenpairs.
DEFLATION_MAX_K = 3


@dataclass(frozen=True)
class LinearOperatorHandle:
    """Dimension plus matvec callback, with an optional preconditioner callback.

    Callbacks must accept N-vectors and N x B blocks.
    """
    n: int
    matvec: Matvec
    precond: Optional[Matvec] = None

    def without_preconditioner(self) -> "LinearOperatorHandle":
        return LinearOperatorHandle(self.n, self.matvec, None)


def gram_handle(g: GramOperator, preconditioned: bool = True) -> LinearOperatorHandle:
    """Operator handle for K + jitter I, preconditioned with B when requested."""
    return LinearOperatorHandle(g.n, g.matvec, g.precond_matvec if preconditioned else None)


def dense_handle(A: np.ndarray) -> LinearOperatorHandle:
    """Operator handle around an explicit matrix."""
    A = np.asarray(A, dtype=np.float64)
    return LinearOperatorHandle(A.shape[0], lambda v: A @ v)


@dataclass(frozen=True)
class ConditionEstimate:
    kappa: float
    lambda_max: float
    lambda_min: float
    is_lower_bound: bool = False

    def __float__(self) -> float:
        return float(self.kappa)


def _check_finite(values: np.ndarray, what: str, report: SolveReport) -> None:
    if not np.all(np.isfinite(values)):
        report.message = f"non-finite {what} at iteration {report.iterations}"
        raise NumericalBreakdownError(f"CG breakdown: {report.message}", report)


def cg_solve(
    A: LinearOperatorHandle,
    b: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 2000,
    x0: Optional[np.ndarray] = None,
    use_preconditioner: bool = True,
) -> Tuple[np.ndarray, SolveReport]:
    """
    Solve A x = b for SPD A by (preconditioned) conjugate gradient.

    Convergence is measured by the unpreconditioned relative residual
    ||b - A x|| / ||b||, so plain and preconditioned runs are comparable.
    The report also carries sqrt(r . M r) relative to its initial value.

    Args:
        A: Operator handle; its ``precond`` is applied when present
        b: Right-hand side
        tol: Relative residual target
        max_iter: Iteration cap
        x0: Initial guess (zeros when omitted)
        use_preconditioner: Set False to ignore ``A.precond``

    Returns:
        (x, report); ``report.converged`` is False when max_iter was hit

    Raises:
        NumericalBreakdownError: NaN/Inf or non-positive curvature
    """
    if not tol > 0:
        raise ParameterError(f"tol must be positive, got {tol}")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if b.size != A.n:
        raise ParameterError(f"Right-hand side has length {b.size}, operator has N={A.n}")
    precond = A.precond if use_preconditioner else None
    report = SolveReport(preconditioned=precond is not None)

    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        report.converged = True
        report.residual_history = [0.0]
        report.preconditioned_history = [0.0]
        return np.zeros_like(b), report

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64).reshape(-1)
    r = b - A.matvec(x) if x0 is not None else b.copy()
    rel = float(np.linalg.norm(r)) / bnorm
    report.residual_history.append(rel)
    if rel <= tol:
        report.converged, report.residual_norm = True, rel
        report.preconditioned_history.append(1.0)
        return x, report

    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(r @ z)
    rz0 = rz if rz > 0.0 else 1.0
    report.preconditioned_history.append(1.0)
    for it in range(1, max_iter + 1):
        report.iterations = it
        Ap = A.matvec(p)
        pAp = float(p @ Ap)
        _check_finite(np.array([pAp]), "curvature", report)
        if pAp <= 0.0:
            report.message = f"non-positive curvature {pAp:.3e}"
            raise NumericalBreakdownError(f"CG breakdown: {report.message}", report)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r)) / bnorm
        _check_finite(np.array([rel]), "residual", report)
        report.residual_history.append(rel)
        z = precond(r) if precond is not None else r
        rz_new = float(r @ z)
        report.preconditioned_history.append(math.sqrt(max(rz_new, 0.0) / rz0))
        logger.debug(f"CG iteration {it}: relative residual {rel:.3e}")
        if rel <= tol:
            report.converged = True
            break
        p = z + (rz_new / rz) * p
        rz = rz_new

    report.residual_norm = rel
    if not report.converged:
        report.message = f"max_iter={max_iter} reached at relative residual {rel:.3e}"
    return x, report


def cg_solve_batch(
    A: LinearOperatorHandle,
    B: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 2000,
    X0: Optional[np.ndarray] = None,
    use_preconditioner: bool = True,
) -> Tuple[np.ndarray, SolveReport]:
    """
    Solve A X = B column by column with independent CG recurrences sharing
    each block matvec. Converged columns are frozen.

    Returns:
        (X, report) where the report holds the worst column's residual
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != A.n:
        raise ParameterError(f"Right-hand side block must be N x k with N={A.n}, got {B.shape}")
    precond = A.precond if use_preconditioner else None
    report = SolveReport(preconditioned=precond is not None)

    bnorm = np.linalg.norm(B, axis=0)
    safe_bnorm = np.where(bnorm > 0, bnorm, 1.0)
    X = np.zeros_like(B) if X0 is None else np.array(X0, dtype=np.float64)
    R = B - A.matvec(X) if X0 is not None else B.copy()
    R[:, bnorm == 0] = 0.0
    X[:, bnorm == 0] = 0.0
    rel = np.linalg.norm(R, axis=0) / safe_bnorm
    active = rel > tol
    report.residual_history.append(float(rel.max(initial=0.0)))

    Z = precond(R) if precond is not None else R.copy()
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        AP = A.matvec(P)
        pAp = np.einsum("ij,ij->j", P, AP)
        _check_finite(pAp, "curvature", report)
        if np.any(pAp[active] <= 0.0):
            report.iterations = it
            report.message = "non-positive curvature in batched CG"
            raise NumericalBreakdownError(f"CG breakdown: {report.message}", report)
        alpha = np.where(active, rz / np.where(active, pAp, 1.0), 0.0)
        X += P * alpha
        R -= AP * alpha
        rel = np.linalg.norm(R, axis=0) / safe_bnorm
        _check_finite(rel, "residual", report)
        report.residual_history.append(float(rel.max()))
        active = active & (rel > tol)
        Z = precond(R) if precond is not None else R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        P = Z + P * beta
        rz = rz_new

    report.iterations = it
    report.residual_norm = float(rel.max(initial=0.0))
    report.converged = not np.any(active)
    if not report.converged:
        report.message = f"{int(active.sum())} of {B.shape[1]} columns unconverged after {max_iter} iterations"
    return X, report


def _deflated_power(
    A: LinearOperatorHandle, k: int, tol: float, max_iter: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    n = A.n
    vectors: List[np.ndarray] = []
    values: List[float] = []
    report = SolveReport(converged=True)
    lam_max = 0.0
    for j in range(k):
        V = np.column_stack(vectors) if vectors else np.zeros((n, 0))
        v = rng.standard_normal(n)
        v -= V @ (V.T @ v)
        v /= np.linalg.norm(v)
        lam, res, converged = 0.0, np.inf, False
        for it in range(1, max_iter + 1):
            Av = A.matvec(v)
            lam = float(v @ Av)
            res = float(np.linalg.norm(Av - lam * v))
            scale = max(lam_max, lam) if j else lam
            report.iterations += 1
            if res <= tol * scale:
                converged = True
                break
            w = Av - V @ (V.T @ Av)
            nrm = float(np.linalg.norm(w))
            if nrm == 0.0:
                converged = True
                break
            v = w / nrm
        if j == 0:
            lam_max = lam
        if not converged:
            report.converged = False
            report.message = f"eigenpair {j} not converged (residual {res:.3e})"
            logger.warning(f"Power iteration: {report.message}")
        # final pass keeps the basis orthonormal to working precision
        v = v - V @ (V.T @ v)
        v /= np.linalg.norm(v)
        vectors.append(v)
        values.append(lam)
        report.residual_history.append(res)
    report.residual_norm = max(report.residual_history)
    return np.array(values), np.column_stack(vectors), report


def _block_power(
    A: LinearOperatorHandle, k: int, tol: float, max_iter: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    n = A.n
    width = min(n, k + max(5, k))
    Q, _ = np.linalg.qr(rng.standard_normal((n, width)))
    report = SolveReport()
    theta = np.zeros(width)
    ritz = Q
    for it in range(1, max_iter + 1):
        AQ = A.matvec(Q)
        H = Q.T @ AQ
        theta, S = np.linalg.eigh(0.5 * (H + H.T))
        order = np.argsort(theta)[::-1]
        theta, S = theta[order], S[:, order]
        ritz = Q @ S
        A_ritz = AQ @ S
        res = np.linalg.norm(A_ritz[:, :k] - ritz[:, :k] * theta[:k], axis=0)
        report.iterations = it
        report.residual_history.append(float(res.max()))
        if np.all(res <= tol * max(theta[0], 0.0)):
            report.converged = True
            break
        Q, _ = np.linalg.qr(A_ritz)
    if not report.converged:
        report.message = f"block power iteration not converged after {max_iter} iterations"
        logger.warning(report.message)
    report.residual_norm = report.residual_history[-1]
    vectors, _ = np.linalg.qr(ritz[:, :k])
    # QR may flip signs; restore the Ritz orientation
    signs = np.sign(np.einsum("ij,ij->j", vectors, ritz[:, :k]))
    vectors = vectors * np.where(signs == 0, 1.0, signs)
    return theta[:k].copy(), vectors, report


def power_topk(
    A: LinearOperatorHandle,
    k: int,
    tol: float = 1e-8,
    max_iter: int = 5000,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """
    Top-k eigenpairs of a symmetric PSD operator.

    Uses power iteration with projection deflation for k <= 3 and block
    power iteration with Rayleigh-Ritz for larger k. A pair is accepted when
    ||A v - lambda v|| <= tol * lambda_max.

    Args:
        A: Operator handle (preconditioner ignored)
        k: Number of eigenpairs
        tol: Relative residual tolerance
        max_iter: Iteration cap
        seed: Seed of the random start vectors

    Returns:
        (eigenvalues descending, N x k orthonormal eigenvectors, report);
        the report is flagged unconverged on partial results
    """
    if not 1 <= k <= A.n:
        raise ParameterError(f"k must lie in [1, {A.n}], got {k}")
    rng = np.random.default_rng(seed)
    if k <= DEFLATION_MAX_K:
        values, vectors, report = _deflated_power(A, k, tol, max_iter, rng)
    else:
        values, vectors, report = _block_power(A, k, tol, max_iter, rng)
    logger.debug(f"power_topk: k={k}, iterations={report.iterations}, converged={report.converged}")
    return values, vectors, report


def estimate_condition(
    A: LinearOperatorHandle,
    tol: float = 1e-6,
    max_iter: int = 500,
    cg_tol: float = 1e-10,
    seed: int = 0,
) -> ConditionEstimate:
    """
    Estimate lambda_max / lambda_min of an SPD operator.

    lambda_max comes from power iteration, lambda_min from inverse iteration
    whose inner solves use CG. When an inner solve fails the estimate is
    flagged as a lower bound.
    """
    plain = A.without_preconditioner()
    values, _, _ = power_topk(plain, 1, tol=tol, max_iter=max_iter, seed=seed)
    lam_max = float(values[0])

    rng = np.random.default_rng(seed + 1)
    v = rng.standard_normal(A.n)
    v /= np.linalg.norm(v)
    mu = 0.0
    lower_bound = False
    for _ in range(max_iter):
        try:
            w, report = cg_solve(A, v, tol=cg_tol, max_iter=10 * A.n + 100)
        except NumericalBreakdownError as e:
            logger.warning(f"Inverse iteration stopped: {e}")
            lower_bound = True
            break
        if not report.converged:
            lower_bound = True
            logger.warning("Inverse iteration solve did not converge; condition estimate is a lower bound")
            break
        mu_new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(mu_new - mu) <= tol * abs(mu_new):
            mu = mu_new
            break
        mu = mu_new

    if mu <= 0.0:
        # no usable inverse estimate: fall back to the trivial bound kappa >= 1
        return ConditionEstimate(1.0, lam_max, lam_max, True)
    lam_min = 1.0 / mu
    return ConditionEstimate(lam_max / lam_min, lam_max, lam_min, lower_bound)
