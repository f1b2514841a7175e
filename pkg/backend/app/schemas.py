"""
Pydantic schemas for sampler configuration, solver options and result records.
Every artifact written by the CLI embeds these models for provenance.
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


# ============================================================================
# Sampler Schemas
# ============================================================================

class TreeConfig(BaseModel):
    """Random forest regression tree hyper-parameters.

    ``None`` for ``mtry`` / ``max_depth`` means the data-dependent default
    (ceil(D/3) features, ceil(log2 N) levels).
    """
    model_config = ConfigDict(frozen=True)

    mtry: Optional[int] = Field(default=None, ge=1, description="Features sampled per split")
    bootstrap: bool = Field(default=True, description="Train each tree on a bootstrap resample")
    min_leaf: int = Field(default=5, ge=1, description="Minimum training rows per leaf")
    max_depth: Optional[int] = Field(default=None, ge=0, description="Maximum tree depth h")


class FastClusterConfig(BaseModel):
    """Fast Cluster sampler hyper-parameters."""
    model_config = ConfigDict(frozen=True)

    h: Optional[int] = Field(default=None, ge=0, description="Maximum center exponent (2^s centers, s <= h)")
    dim_keep_prob: float = Field(default=0.5, gt=0.0, le=1.0, description="Bernoulli parameter of the dimension mask")


class SamplerSpec(BaseModel):
    """Structured description of a partition sampler (kind + hyper-parameters + seed)."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["rf", "fastcluster", "categorical"]
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    tree: TreeConfig = Field(default_factory=TreeConfig)
    fast_cluster: FastClusterConfig = Field(default_factory=FastClusterConfig)


# ============================================================================
# Solver Schemas
# ============================================================================

class SolverOptions(BaseModel):
    """Options shared by the iterative solvers."""
    model_config = ConfigDict(frozen=True)

    tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=2000, ge=1)
    use_preconditioner: bool = True


class SolveReport(BaseModel):
    """Outcome of an iterative solve."""
    iterations: int = 0
    residual_norm: float = Field(default=0.0, description="Final relative residual ||Ax - b|| / ||b||")
    converged: bool = False
    residual_history: List[float] = Field(default_factory=list)
    preconditioned_history: List[float] = Field(
        default_factory=list, description="sqrt(r . M r) relative to the initial residual, single-RHS CG only"
    )
    preconditioned: bool = False
    message: str = ""


# ============================================================================
# CLI / Result Schemas
# ============================================================================

class RunConfig(BaseModel):
    """Full description of one CLI invocation."""
    command: Literal["sample", "gp", "msweep", "scaling", "kpca"]
    dataset: str = "mpg-like"
    kernel: Literal["rf", "fastcluster", "rbf", "linear", "categorical"] = "rf"
    m: int = Field(default=200, ge=1)
    m_list: List[int] = Field(default_factory=list)
    n_list: List[int] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0)
    n_seeds: int = Field(default=1, ge=1)
    noise: float = Field(default=1e-2, gt=0.0, description="GP noise variance / preconditioner sigma")
    precond_sigma: Optional[float] = Field(default=None, gt=0.0)
    tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=2000, ge=1)
    threads: int = Field(default=1, ge=1)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    k: int = Field(default=2, ge=1)
    trials: int = Field(default=20, ge=2, description="Independent ensembles for the kernel-entry variance")
    target: Optional[str] = Field(default=None, description="Target column of a CSV dataset")
    project_test: bool = Field(default=False, description="KPCA: fit on the train split and project the test rows")
    out: Optional[str] = Field(default=None, description="Output directory (default: settings.output_dir)")
    sampler: Optional[SamplerSpec] = None
    diagnostics: bool = False
    version: str = ""


class EvalRecord(BaseModel):
    """One row of a metrics table."""
    dataset: str
    kernel: str
    m: Optional[int] = None
    seed: int
    mse: float
    log_likelihood: float
    iterations: int = 0
    wall_time: float = 0.0
    n_train: int = 0
    n_test: int = 0
    clamped_variances: int = 0
    hyperparameters: Dict[str, Any] = Field(default_factory=dict)


class CsvSchema(BaseModel):
    """Column roles for CSV ingestion."""
    name: Optional[str] = None
    target: Optional[str] = Field(default=None, description="Regression target column")
    categorical: List[str] = Field(default_factory=list, description="Columns forced to categorical")
    drop: List[str] = Field(default_factory=list, description="Columns ignored entirely")
    delimiter: str = ","
    strict: bool = Field(default=False, description="Raise on the first unparseable cell")


class SplitSpec(BaseModel):
    """Seeded train/test split."""
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)


class IngestReport(BaseModel):
    """Summary of a CSV ingestion."""
    source: str
    source_hash: Optional[str] = Field(default=None, description="SHA-256 of the source file")
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped_missing: int = 0
    rows_dropped_unparseable: int = 0
    row_errors: List[Dict[str, Any]] = Field(default_factory=list)
    numeric_columns: List[str] = Field(default_factory=list)
    categorical_columns: List[str] = Field(default_factory=list)
    target: Optional[str] = None
