"""
Command handlers for the partition kernel CLI.
Each handler takes a validated RunConfig, runs one experiment and writes
its artifacts through the ReportBuilder.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app import __version__
from app.config import Settings, get_settings
from app.schemas import EvalRecord, RunConfig, SamplerSpec, SolverOptions, SplitSpec
from core.baselines import make_dense_kernel, median_distance, select_baseline
from core.data_io import REGISTRY, Dataset, load_dataset, split, standardize, synth_mpg_like
from core.errors import DataError, ParameterError, SolverError
from core.linalg import cg_solve, dense_handle, estimate_condition, gram_handle
from core.models import (
    DenseKernel,
    GPRegressor,
    KernelSource,
    PartitionKernel,
    gp_evaluate,
    kernel_entry_variance,
    kpca_fit,
    kpca_fit_dense,
)
from core.partitions import PartitionEnsemble
from core.report_builder import ReportBuilder
from core.samplers import sample_ensemble
from core.serialization import save_ensemble
from utils.helpers import sanitize_filename, timed

logger = logging.getLogger(__name__)

PARTITION_KERNELS = ("rf", "fastcluster", "categorical")
DENSE_KERNELS = ("rbf", "linear")
SCALING_KERNELS = ("fastcluster", "rf", "rbf")
DEFAULT_SCALING_SIZES = (500, 1000, 2000, 4000)
# variance ensembles use seeds disjoint from the fit seeds
VARIANCE_SEED_OFFSET = 10_000


@dataclass
class PreparedKernel:
    source: KernelSource
    noise: float
    hyperparameters: Dict[str, Any] = field(default_factory=dict)
    ensemble: Optional[PartitionEnsemble] = None


# ============================================================================
# Shared plumbing
# ============================================================================

def _builder(config: RunConfig, settings: Settings) -> ReportBuilder:
    return ReportBuilder(config.out or settings.output_dir, config)


def _stem(config: RunConfig, *parts: Any) -> str:
    label = config.dataset if config.dataset in REGISTRY else Path(config.dataset).stem
    return sanitize_filename("_".join([config.command, label, *[str(p) for p in parts]]))


def _ingest(dataset: Dataset) -> Dict[str, Any]:
    """Ingest report for sidecars (CSV-backed datasets only)."""
    return {"ingest": dataset.report} if dataset.report is not None else {}


def sampler_spec(config: RunConfig, seed: Optional[int] = None) -> SamplerSpec:
    """The configured sampler, or the default one for ``config.kernel``."""
    if config.kernel not in PARTITION_KERNELS:
        raise ParameterError(f"Kernel '{config.kernel}' is not a partition kernel")
    spec = config.sampler or SamplerSpec(kind=config.kernel, seed=config.seed)
    if spec.kind != config.kernel:
        raise ParameterError(f"Sampler kind '{spec.kind}' does not match kernel '{config.kernel}'")
    return spec if seed is None else spec.model_copy(update={"seed": seed})


def _categorical_columns(dataset: Dataset) -> List[np.ndarray]:
    if not dataset.categorical:
        raise DataError(f"Dataset '{dataset.name}' has no categorical columns")
    return [dataset.categorical[name] for name in sorted(dataset.categorical)]


def test_input(kind: str, dataset: Dataset) -> Any:
    """What the kernel's cross product needs for these rows."""
    return dataset.categorical_table() if kind == "categorical" else dataset.X


def draw_ensemble(spec: SamplerSpec, m: int, dataset: Dataset, n_jobs: int) -> PartitionEnsemble:
    columns = _categorical_columns(dataset) if spec.kind == "categorical" else None
    return sample_ensemble(spec, m, dataset.X, dataset.y, columns, n_jobs=n_jobs)


def prepare_kernel(config: RunConfig, train: Dataset, settings: Settings, m: Optional[int] = None) -> PreparedKernel:
    """Partition kernel from a fresh ensemble, or a grid-selected dense baseline."""
    if config.kernel in DENSE_KERNELS:
        choice = select_baseline(config.kernel, train.X, train.y, cap=settings.dense_cap)
        return PreparedKernel(choice.kernel, choice.noise, {**choice.kernel.hyperparameters, "noise": choice.noise})
    ensemble = draw_ensemble(sampler_spec(config), m or config.m, train, config.threads)
    source = PartitionKernel(ensemble, config.precond_sigma, config.threads, settings.dense_cap)
    return PreparedKernel(source, config.noise, {"noise": config.noise, "m": ensemble.m}, ensemble)


def _load_split(config: RunConfig, settings: Settings) -> Tuple[Dataset, Dataset]:
    dataset = load_dataset(config.dataset, settings.data_dir, seed=config.seed, target=config.target)
    if dataset.y is None:
        raise DataError(f"Dataset '{dataset.name}' has no regression target")
    return split(dataset, SplitSpec(train_fraction=config.train_fraction, seed=config.seed))


def _options(config: RunConfig) -> SolverOptions:
    return SolverOptions(tol=config.tol, max_iter=config.max_iter)


def solve_diagnostics(model: GPRegressor, y_train: np.ndarray, options: SolverOptions) -> Dict[str, Any]:
    """Plain CG vs PCG iteration counts and a condition estimate of K + noise I."""
    y_std = (y_train - model.y_mean) / model.y_scale
    kernel = model.kernel
    if isinstance(kernel, PartitionKernel):
        operator = kernel.gram.with_jitter(model.noise)
        plain_handle = gram_handle(operator, preconditioned=False)
        cond_handle = gram_handle(operator, preconditioned=True)
    else:
        A = kernel.dense() + model.noise * np.eye(kernel.n)
        plain_handle = cond_handle = dense_handle(A)

    _, plain = cg_solve(plain_handle, y_std, options.tol, options.max_iter)
    estimate = estimate_condition(cond_handle)
    return {
        "cg_iterations": plain.iterations,
        "cg_converged": plain.converged,
        "pcg_iterations": model.report.iterations if model.report else None,
        "kappa": estimate.kappa,
        "lambda_max": estimate.lambda_max,
        "lambda_min": estimate.lambda_min,
        "kappa_is_lower_bound": estimate.is_lower_bound,
    }


def fit_and_evaluate(
    config: RunConfig,
    prepared: PreparedKernel,
    train: Dataset,
    test: Dataset,
    seed: int,
) -> Tuple[EvalRecord, GPRegressor]:
    model = GPRegressor(prepared.source, prepared.noise, _options(config))
    with timed("gp fit") as clock:
        model.fit(train.y)
        metrics = gp_evaluate(model, test_input(config.kernel, test), test.y)
    record = EvalRecord(
        dataset=config.dataset,
        kernel=config.kernel,
        m=prepared.ensemble.m if prepared.ensemble is not None else None,
        seed=seed,
        mse=metrics.mse,
        log_likelihood=metrics.log_likelihood,
        iterations=model.report.iterations,
        wall_time=clock["seconds"],
        n_train=train.n,
        n_test=test.n,
        clamped_variances=metrics.n_clamped,
        hyperparameters=prepared.hyperparameters,
    )
    return record, model


# ============================================================================
# Commands
# ============================================================================

def cmd_sample(config: RunConfig, settings: Optional[Settings] = None) -> str:
    """
    Draw a partition ensemble on the (standardized) dataset and save it.

    Returns:
        Path to the ensemble file
    """
    settings = settings or get_settings()
    dataset = standardize(load_dataset(config.dataset, settings.data_dir, seed=config.seed, target=config.target))
    spec = sampler_spec(config)
    ensemble = draw_ensemble(spec, config.m, dataset, config.threads)

    builder = _builder(config, settings)
    stem = _stem(config, config.kernel, f"m{config.m}", f"seed{spec.seed}")
    path = save_ensemble(
        ensemble,
        builder.output_dir / f"{stem}.rpk",
        provenance={"run_config": config.model_dump(mode="json"), "version": __version__},
    )
    sizes = [p.n_clusters for p in ensemble.partitions]
    builder.build_json(
        {
            "ensemble": Path(path).name,
            "m": ensemble.m,
            "n": ensemble.n,
            "clusters_min": int(min(sizes)),
            "clusters_mean": float(np.mean(sizes)),
            "clusters_max": int(max(sizes)),
            **_ingest(dataset),
        },
        stem,
    )
    return path


def cmd_gp(config: RunConfig, settings: Optional[Settings] = None) -> EvalRecord:
    """
    Fit a GP on the train split and evaluate test MSE / mean log-likelihood.

    On solver failure the partial solve report is written before the error
    propagates.
    """
    settings = settings or get_settings()
    train, test = _load_split(config, settings)
    prepared = prepare_kernel(config, train, settings)
    builder = _builder(config, settings)
    stem = _stem(config, config.kernel, f"seed{config.seed}")

    try:
        record, model = fit_and_evaluate(config, prepared, train, test, config.seed)
    except SolverError as e:
        builder.build_json({"status": "failed", "error": str(e), "solve_report": e.report}, f"{stem}_failed")
        raise

    extra: Dict[str, Any] = {"solve_report": model.report, **_ingest(train)}
    if config.diagnostics:
        extra["diagnostics"] = solve_diagnostics(model, train.y, _options(config))
        logger.info(f"Diagnostics: {extra['diagnostics']}")
    builder.build_table([record], stem, extra)
    logger.info(f"{config.kernel} GP on {config.dataset}: MSE={record.mse:.4f}, LL={record.log_likelihood:.4f}")
    return record


def cmd_msweep(config: RunConfig, settings: Optional[Settings] = None) -> pd.DataFrame:
    """
    Test metrics as a function of m, averaged over seeds.

    One ensemble of max(m_list) partitions is drawn per seed; each m uses its
    first m partitions. A second table reports the spread of a kernel entry
    over independent ensembles next to the 1/(4m) bound.
    """
    settings = settings or get_settings()
    m_list = config.m_list or [config.m]
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ParameterError(f"m list must be strictly ascending, got {m_list}")
    if config.kernel not in PARTITION_KERNELS:
        raise ParameterError("The m-sweep needs a partition kernel (rf, fastcluster or categorical)")

    train, test = _load_split(config, settings)
    records: List[EvalRecord] = []
    for seed in range(config.seed, config.seed + config.n_seeds):
        full = draw_ensemble(sampler_spec(config, seed), m_list[-1], train, config.threads)
        for m in m_list:
            source = PartitionKernel(full.subset(m), config.precond_sigma, config.threads, settings.dense_cap)
            prepared = PreparedKernel(source, config.noise, {"noise": config.noise, "m": m}, source.ensemble)
            record, _ = fit_and_evaluate(config, prepared, train, test, seed)
            records.append(record)
            logger.info(f"m={m} seed={seed}: MSE={record.mse:.4f}, LL={record.log_likelihood:.4f}")

    runs = pd.DataFrame([r.model_dump() for r in records])
    summary = (
        runs.groupby("m", sort=True)
        .agg(
            log_likelihood=("log_likelihood", "mean"),
            log_likelihood_std=("log_likelihood", "std"),
            mse=("mse", "mean"),
            mse_std=("mse", "std"),
            iterations=("iterations", "mean"),
            n_seeds=("seed", "count"),
        )
        .reset_index()
    )

    builder = _builder(config, settings)
    builder.build_table(records, _stem(config, config.kernel, "runs"), _ingest(train))
    builder.build_table(summary, _stem(config, config.kernel))

    # pair of the first two training points; every ensemble is a prefix of the largest one
    pool: Dict[int, PartitionEnsemble] = {}

    def trial_ensemble(m: int, trial: int) -> PartitionEnsemble:
        if trial not in pool:
            spec = sampler_spec(config, VARIANCE_SEED_OFFSET + config.seed + trial)
            pool[trial] = draw_ensemble(spec, m_list[-1], train, config.threads)
        return pool[trial].subset(m)

    variance_rows = []
    for m in m_list:
        mean, var = kernel_entry_variance(trial_ensemble, (0, 1), m, config.trials)
        variance_rows.append({"m": m, "entry_mean": mean, "entry_variance": var, "bound": 1.0 / (4.0 * m)})
    builder.build_table(variance_rows, _stem(config, config.kernel, "variance"), {"pair": [0, 1], "trials": config.trials})
    return summary


def _scaling_time(kind: str, dataset: Dataset, config: RunConfig, settings: Settings) -> float:
    with timed(f"{kind} kpca N={dataset.n}") as clock:
        if kind == "rbf":
            params = {"lengthscale": median_distance(dataset.X), "amplitude": 1.0}
            kpca_fit_dense(make_dense_kernel("rbf", dataset.X, params), config.k)
        else:
            spec = SamplerSpec(kind=kind, seed=config.seed)
            ensemble = draw_ensemble(spec, config.m, dataset, config.threads)
            kpca_fit(ensemble, config.k, tol=settings.power_tol, max_iter=settings.power_max_iter, seed=config.seed, n_jobs=config.threads)
    return clock["seconds"]


def cmd_scaling(config: RunConfig, settings: Optional[Settings] = None) -> pd.DataFrame:
    """
    KPCA wall-time against N for Fast Cluster, Random Forest and dense RBF.

    The slope of log(time) against log(N) is reported per kernel; the dense
    kernel is skipped above the dense cap.
    """
    settings = settings or get_settings()
    n_list = sorted(config.n_list or DEFAULT_SCALING_SIZES)
    rows = []
    for n in n_list:
        dataset = standardize(synth_mpg_like(n, seed=config.seed))
        for kind in SCALING_KERNELS:
            if kind == "rbf" and n > settings.dense_cap:
                logger.warning(f"Skipping dense RBF at N={n} (cap {settings.dense_cap})")
                continue
            seconds = _scaling_time(kind, dataset, config, settings)
            rows.append({"kernel": kind, "n": n, "m": None if kind == "rbf" else config.m, "seconds": seconds})
            logger.info(f"{kind} KPCA N={n}: {seconds:.3f}s")

    table = pd.DataFrame(rows)
    slopes: Dict[str, float] = {}
    for kind, group in table.groupby("kernel"):
        if len(group) >= 2:
            slopes[kind] = float(np.polyfit(np.log(group["n"]), np.log(group["seconds"]), 1)[0])
        else:
            slopes[kind] = math.nan

    builder = _builder(config, settings)
    builder.build_table(table, _stem(config, "timings"), {"slopes": slopes})
    builder.build_table([{"kernel": k, "slope": s} for k, s in slopes.items()], _stem(config, "slopes"))
    logger.info(f"Log-log slopes: {slopes}")
    return table


def cmd_kpca(config: RunConfig, settings: Optional[Settings] = None) -> str:
    """
    Top-k kernel PCA coordinates as CSV.

    ``linear`` gives plain PCA and ``rbf`` dense RBF KPCA (median-distance
    lengthscale); the partition kernels run matrix-free. With
    ``project_test`` the model is fitted on the train split and the test
    rows are projected out of sample.

    Returns:
        Path to the coordinates table
    """
    settings = settings or get_settings()
    dataset = load_dataset(config.dataset, settings.data_dir, seed=config.seed, target=config.target)
    if config.project_test:
        train, test = split(dataset, SplitSpec(train_fraction=config.train_fraction, seed=config.seed))
    else:
        train, test = standardize(dataset), None

    if config.kernel in DENSE_KERNELS:
        params = {"amplitude": 1.0}
        if config.kernel == "rbf":
            params["lengthscale"] = median_distance(train.X)
        kernel: KernelSource = make_dense_kernel(config.kernel, train.X, params)
        model = kpca_fit_dense(kernel, config.k)
    else:
        ensemble = draw_ensemble(sampler_spec(config), config.m, train, config.threads)
        kernel = PartitionKernel(ensemble, n_jobs=config.threads, dense_cap=settings.dense_cap)
        model = kpca_fit(kernel, config.k, tol=settings.power_tol, max_iter=settings.power_max_iter, seed=config.seed)

    columns = [f"pc{i + 1}" for i in range(config.k)]
    frames = [_coordinate_frame(model.training_coordinates(), columns, train, "train")]
    if test is not None:
        frames.append(_coordinate_frame(model.project(test_input(config.kernel, test)), columns, test, "test"))
    table = pd.concat(frames, ignore_index=True)

    builder = _builder(config, settings)
    extra = {"eigenvalues": model.eigenvalues, "eigen_report": model.report, **_ingest(train)}
    if isinstance(kernel, DenseKernel):
        extra["hyperparameters"] = kernel.hyperparameters
    return builder.build_table(table, _stem(config, config.kernel, f"k{config.k}"), extra)


def _coordinate_frame(coords: np.ndarray, columns: List[str], dataset: Dataset, label: str) -> pd.DataFrame:
    frame = pd.DataFrame(coords, columns=columns)
    frame.insert(0, "split", label)
    frame.insert(0, "row", dataset.metadata.get("rows", list(range(dataset.n))))
    if dataset.y is not None:
        frame["target"] = dataset.y
    return frame


COMMANDS = {
    "sample": cmd_sample,
    "gp": cmd_gp,
    "msweep": cmd_msweep,
    "scaling": cmd_scaling,
    "kpca": cmd_kpca,
}
