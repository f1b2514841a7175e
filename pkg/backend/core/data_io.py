"""
Dataset ingestion, standardization, splitting and the desk-scale registry.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.schemas import CsvSchema, IngestReport, SplitSpec
from core.errors import DataError, ParameterError
from utils.helpers import get_file_hash

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "?", "na", "n/a", "nan", "null", "none"}
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_matrix(cls, X: np.ndarray) -> "StandardizationStats":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # constant columns are centered only
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass(frozen=True)
class Dataset:
    """
    Numeric features, optional target and categorical columns (integer codes).

    ``stats`` is set once X has been standardized.
    """
    name: str
    X: np.ndarray
    y: Optional[np.ndarray] = None
    feature_names: List[str] = field(default_factory=list)
    categorical: Dict[str, np.ndarray] = field(default_factory=dict)
    categories: Dict[str, List[str]] = field(default_factory=dict)
    stats: Optional[StandardizationStats] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    report: Optional[IngestReport] = None

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def d(self) -> int:
        return int(self.X.shape[1])

    def categorical_table(self) -> np.ndarray:
        """N x C matrix of category codes (C = number of categorical columns)."""
        if not self.categorical:
            return np.zeros((self.n, 0), dtype=np.int64)
        return np.column_stack([self.categorical[name] for name in sorted(self.categorical)])

    def take(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            X=self.X[rows],
            y=None if self.y is None else self.y[rows],
            categorical={k: v[rows] for k, v in self.categorical.items()},
            metadata={**self.metadata, "rows": rows.tolist()},
        )


# ============================================================================
# CSV ingestion
# ============================================================================

def _is_missing(value: str) -> bool:
    return value.strip().lower() in MISSING_TOKENS


def _parse_float(value: str) -> Optional[float]:
    try:
        parsed = float(value)
    except ValueError:
        return None
    return parsed if math.isfinite(parsed) else None


def load_csv(path: Union[str, Path], schema: Optional[CsvSchema] = None) -> Dataset:
    """
    Load a delimited file with a header row.

    Numeric cells are parsed with Python's correctly rounded float parser.
    Rows with a missing cell are dropped and counted; rows with an
    unparseable numeric cell are dropped and listed in the ingest report
    (or raise when ``schema.strict``). A column is categorical when declared
    so or when none of its present values is numeric.

    Args:
        path: CSV path
        schema: Column roles

    Returns:
        Dataset with ``report`` attached
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise DataError(f"CSV file is empty: {path}") from e
    if frame.shape[0] == 0:
        raise DataError(f"CSV file has no data rows: {path}")
    frame.columns = [str(c).strip() for c in frame.columns]

    unknown = [c for c in [schema.target, *schema.categorical, *schema.drop] if c and c not in frame.columns]
    if unknown:
        raise DataError(f"Columns not found in {path.name}: {unknown}")
    columns = [c for c in frame.columns if c not in schema.drop]

    missing = np.zeros(len(frame), dtype=bool)
    for c in columns:
        missing |= frame[c].map(_is_missing).to_numpy(dtype=bool)

    categorical_cols: List[str] = []
    numeric_cols: List[str] = []
    for c in columns:
        if c == schema.target:
            continue
        present = frame[c][~missing]
        if c in schema.categorical or (len(present) and present.map(_parse_float).isna().all()):
            categorical_cols.append(c)
        else:
            numeric_cols.append(c)

    parse_cols = numeric_cols + ([schema.target] if schema.target else [])
    parsed: Dict[str, np.ndarray] = {}
    bad = np.zeros(len(frame), dtype=bool)
    row_errors: List[Dict[str, Any]] = []
    for c in parse_cols:
        values = np.full(len(frame), np.nan)
        for i, cell in enumerate(frame[c].tolist()):
            if missing[i]:
                continue
            number = _parse_float(cell)
            if number is None:
                bad[i] = True
                row_errors.append({"row": i + 1, "column": c, "value": cell})
            else:
                values[i] = number
        parsed[c] = values

    if row_errors and schema.strict:
        raise DataError(f"Unparseable cells in {path.name}: {row_errors[:5]}")

    keep = ~(missing | bad)
    report = IngestReport(
        source=str(path),
        source_hash=get_file_hash(path),
        rows_read=len(frame),
        rows_kept=int(keep.sum()),
        rows_dropped_missing=int(missing.sum()),
        rows_dropped_unparseable=int((bad & ~missing).sum()),
        row_errors=row_errors,
        numeric_columns=numeric_cols,
        categorical_columns=categorical_cols,
        target=schema.target,
    )
    if report.rows_kept == 0:
        raise DataError(f"No usable rows in {path.name}")
    if report.rows_dropped_missing or report.rows_dropped_unparseable:
        logger.warning(
            f"{path.name}: dropped {report.rows_dropped_missing} rows with missing values "
            f"and {report.rows_dropped_unparseable} with unparseable cells"
        )

    X = np.column_stack([parsed[c][keep] for c in numeric_cols]) if numeric_cols else np.zeros((report.rows_kept, 0))
    y = parsed[schema.target][keep] if schema.target else None
    categorical: Dict[str, np.ndarray] = {}
    categories: Dict[str, List[str]] = {}
    for c in categorical_cols:
        codes, uniques = pd.factorize(frame[c][keep].str.strip())
        categorical[c] = codes.astype(np.int64)
        categories[c] = [str(u) for u in uniques]

    logger.info(f"Loaded {path.name}: {report.rows_kept} rows, {len(numeric_cols)} numeric, {len(categorical_cols)} categorical")
    return Dataset(
        name=schema.name or path.stem,
        X=X,
        y=y,
        feature_names=numeric_cols,
        categorical=categorical,
        categories=categories,
        report=report,
    )


# ============================================================================
# Splitting
# ============================================================================

def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle into disjoint train/test index sets covering range(n)."""
    if not 0 < spec.train_fraction < 1:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {spec.train_fraction}")
    if n < 2:
        raise DataError("Splitting needs at least two rows")
    n_train = min(n - 1, max(1, int(round(spec.train_fraction * n))))
    perm = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """
    Split and standardize X with statistics computed on the training rows only.

    Returns:
        (train, test); both carry the training ``stats`` and their source rows
        in ``metadata["rows"]``
    """
    train_idx, test_idx = split_indices(dataset.n, spec)
    train, test = dataset.take(train_idx), dataset.take(test_idx)
    stats = StandardizationStats.from_matrix(train.X)
    return (
        replace(train, X=stats.apply(train.X), stats=stats),
        replace(test, X=stats.apply(test.X), stats=stats),
    )


def standardize(dataset: Dataset) -> Dataset:
    """Standardize X with the dataset's own statistics (no split)."""
    stats = StandardizationStats.from_matrix(dataset.X)
    return replace(dataset, X=stats.apply(dataset.X), stats=stats)


# ============================================================================
# Serialization
# ============================================================================

def save_dataset(dataset: Dataset, path: Union[str, Path]) -> str:
    """Write a dataset as a versioned .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": DATASET_FORMAT_VERSION,
        "name": dataset.name,
        "feature_names": dataset.feature_names,
        "categories": dataset.categories,
        "categorical_order": sorted(dataset.categorical),
        "has_target": dataset.y is not None,
    }
    arrays = {"X": dataset.X, "meta": np.array(json.dumps(meta))}
    if dataset.y is not None:
        arrays["y"] = dataset.y
    for i, name in enumerate(meta["categorical_order"]):
        arrays[f"cat_{i}"] = dataset.categorical[name]
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return str(path)


def read_dataset(path: Union[str, Path]) -> Dataset:
    """Read a dataset written by ``save_dataset``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset file not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("version") != DATASET_FORMAT_VERSION:
            raise DataError(f"Unsupported dataset format version {meta.get('version')}")
        categorical = {name: archive[f"cat_{i}"] for i, name in enumerate(meta["categorical_order"])}
        return Dataset(
            name=meta["name"],
            X=archive["X"],
            y=archive["y"] if meta["has_target"] else None,
            feature_names=list(meta["feature_names"]),
            categorical=categorical,
            categories={k: list(v) for k, v in meta["categories"].items()},
        )


# ============================================================================
# Synthetic datasets
# ============================================================================

PIECEWISE_STEPS = (0.2, 0.45, 0.7)
PIECEWISE_LEVELS = (-1.0, 1.5, 0.0, 2.0)


def synth_piecewise(n: int = 100, noise: float = 0.1, seed: int = 0) -> Dataset:
    """
    1-D inputs on [0, 1] with a piecewise-constant target plus Gaussian noise.

    The step locations and levels are stored in ``metadata``.
    """
    if n < 10:
        raise ParameterError(f"synth_piecewise needs n >= 10, got {n}")
    if noise < 0:
        raise ParameterError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 1.0, size=n))
    levels = np.array(PIECEWISE_LEVELS)
    clean = levels[np.searchsorted(np.array(PIECEWISE_STEPS), x, side="right")]
    y = clean + noise * rng.standard_normal(n) if noise > 0 else clean.copy()
    return Dataset(
        name="piecewise",
        X=x[:, None],
        y=y,
        feature_names=["x"],
        metadata={"steps": list(PIECEWISE_STEPS), "levels": list(PIECEWISE_LEVELS), "noise": noise, "seed": seed},
    )


def synth_mpg_like(n: int = 392, seed: int = 0) -> Dataset:
    """Fuel-economy style regression: engine size drives weight, power and mpg."""
    rng = np.random.default_rng(seed)
    cylinders = rng.choice([4, 6, 8], size=n, p=[0.5, 0.25, 0.25]).astype(np.float64)
    displacement = cylinders * rng.uniform(20.0, 45.0, size=n)
    horsepower = 0.35 * displacement + rng.normal(40.0, 12.0, size=n)
    weight = 7.5 * displacement + rng.normal(1500.0, 250.0, size=n)
    acceleration = 22.0 - 0.03 * horsepower + rng.normal(0.0, 1.5, size=n)
    model_year = rng.integers(70, 83, size=n).astype(np.float64)
    origin = rng.choice([0, 1, 2], size=n, p=[0.6, 0.2, 0.2])
    mpg = (
        4.2e4 / weight
        + 0.7 * (model_year - 70)
        - 2.5 * (cylinders == 8)
        + 1.5 * (origin > 0)
        + rng.normal(0.0, 1.5, size=n)
    )
    X = np.column_stack([cylinders, displacement, horsepower, weight, acceleration, model_year, origin])
    return Dataset(
        name="mpg-like",
        X=X,
        y=mpg,
        feature_names=["cylinders", "displacement", "horsepower", "weight", "acceleration", "model_year", "origin"],
        categorical={"origin": origin.astype(np.int64)},
        categories={"origin": ["0", "1", "2"]},
        metadata={"synthetic": True, "seed": seed},
    )


def synth_bodyfat_like(n: int = 252, seed: int = 0) -> Dataset:
    """Body-measurement style regression: fat fraction from girth ratios."""
    rng = np.random.default_rng(seed)
    age = rng.uniform(22.0, 81.0, size=n)
    height = rng.normal(70.0, 2.6, size=n)
    fat = np.clip(rng.normal(19.0, 8.0, size=n), 2.0, 45.0)
    weight = 100.0 + 2.4 * (height - 60.0) + 2.2 * fat + rng.normal(0.0, 12.0, size=n)
    abdomen = 70.0 + 0.6 * fat + 0.12 * weight + rng.normal(0.0, 3.0, size=n)
    chest = 0.7 * abdomen + 0.1 * weight + rng.normal(20.0, 3.0, size=n)
    hip = 0.5 * abdomen + 0.12 * weight + rng.normal(30.0, 2.5, size=n)
    neck = 30.0 + 0.04 * weight + rng.normal(0.0, 1.2, size=n)
    thigh = 0.35 * hip + rng.normal(25.0, 2.5, size=n)
    knee = 0.1 * weight + rng.normal(20.0, 1.0, size=n)
    ankle = rng.normal(23.0, 1.2, size=n)
    biceps = 0.08 * weight + rng.normal(18.0, 1.5, size=n)
    forearm = rng.normal(28.7, 1.5, size=n)
    wrist = rng.normal(18.2, 0.9, size=n)
    X = np.column_stack([age, weight, height, neck, chest, abdomen, hip, thigh, knee, ankle, biceps, forearm, wrist])
    names = ["age", "weight", "height", "neck", "chest", "abdomen", "hip", "thigh", "knee", "ankle", "biceps", "forearm", "wrist"]
    body_fat = fat + 0.03 * (age - 45.0) + rng.normal(0.0, 1.0, size=n)
    return Dataset(name="bodyfat-like", X=X, y=body_fat, feature_names=names, metadata={"synthetic": True, "seed": seed})


# ============================================================================
# Registry
# ============================================================================

@dataclass(frozen=True)
class DatasetEntry:
    name: str
    filename: Optional[str]
    schema: Optional[CsvSchema]
    synthetic: Optional[Callable[[int], Dataset]]


REGISTRY: Dict[str, DatasetEntry] = {
    "mpg": DatasetEntry(
        "mpg", "auto-mpg.csv",
        CsvSchema(name="mpg", target="mpg", categorical=["origin"], drop=["car name"]),
        lambda seed: synth_mpg_like(seed=seed),
    ),
    "bodyfat": DatasetEntry(
        "bodyfat", "bodyfat.csv",
        CsvSchema(name="bodyfat", target="BodyFat", drop=["Density"]),
        lambda seed: synth_bodyfat_like(seed=seed),
    ),
    "mpg-like": DatasetEntry("mpg-like", None, None, lambda seed: synth_mpg_like(seed=seed)),
    "bodyfat-like": DatasetEntry("bodyfat-like", None, None, lambda seed: synth_bodyfat_like(seed=seed)),
    "piecewise": DatasetEntry("piecewise", None, None, lambda seed: synth_piecewise(200, 0.2, seed)),
}


def load_dataset(name: str, data_dir: Union[str, Path], seed: int = 0, target: Optional[str] = None) -> Dataset:
    """
    Resolve a dataset reference.

    Registered names load ``<data_dir>/<filename>`` when present and fall back
    to their synthetic analog otherwise; any other reference is read as a CSV
    path (``target`` names its target column, default: the last column).
    """
    entry = REGISTRY.get(name)
    if entry is not None:
        if entry.filename is not None:
            path = Path(data_dir) / entry.filename
            if path.exists():
                return load_csv(path, entry.schema)
            logger.warning(f"{path} not found; using the synthetic '{name}-like' analog")
        return entry.synthetic(seed)

    path = Path(name)
    if not path.exists():
        path = Path(data_dir) / name
    if not path.exists():
        raise DataError(f"Unknown dataset '{name}' (not registered and no such file)")
    if target is None:
        header = pd.read_csv(path, nrows=0)
        target = str(header.columns[-1]).strip()
    return load_csv(path, CsvSchema(name=path.stem, target=target))
