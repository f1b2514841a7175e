"""
Report builder module.
Writes result tables as CSV with a JSON provenance sidecar next to each one.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app import __version__
from app.schemas import RunConfig
from utils.helpers import sanitize_filename

logger = logging.getLogger(__name__)

Rows = Union[pd.DataFrame, Sequence[Dict[str, Any]], Sequence[BaseModel]]


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def rows_to_frame(rows: Rows) -> pd.DataFrame:
    """Normalize records (dicts or pydantic models) into a DataFrame."""
    if isinstance(rows, pd.DataFrame):
        return rows
    records: List[Dict[str, Any]] = []
    for row in rows:
        record = row.model_dump(mode="json") if isinstance(row, BaseModel) else dict(row)
        # nested values go into the table as JSON text
        records.append({k: json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v for k, v in record.items()})
    return pd.DataFrame.from_records(records)


class ReportBuilder:
    """Builds CSV result tables and provenance sidecars for one run."""

    def __init__(self, output_dir: Union[str, Path], config: Optional[RunConfig] = None):
        """
        Initialize the report builder.

        Args:
            output_dir: Directory to save tables and sidecars
            config: Run configuration embedded in every sidecar
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config = config

    def provenance(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        return {
            "version": __version__,
            "generated_at": datetime.now().isoformat(),
            "run_config": self.config.model_dump(mode="json") if self.config else None,
            **_jsonable(extra or {}),
        }

    def build_table(self, rows: Rows, name: str, extra: Optional[Dict[str, Any]] = None) -> str:
        """
        Save a result table and its sidecar.

        Args:
            rows: Records or a DataFrame
            name: File stem
            extra: Additional sidecar fields (solve reports, slopes, ...)

        Returns:
            Path to the CSV file
        """
        frame = rows_to_frame(rows)
        stem = sanitize_filename(name)
        csv_path = self.output_dir / f"{stem}.csv"
        frame.to_csv(csv_path, index=False)
        sidecar = self.provenance({"table": csv_path.name, "columns": list(frame.columns), "rows": len(frame), **(extra or {})})
        self._save_json(sidecar, self.output_dir / f"{stem}.json")
        logger.info(f"Saved table {csv_path} ({len(frame)} rows)")
        return str(csv_path)

    def build_json(self, payload: Dict[str, Any], name: str) -> str:
        """Save a standalone JSON document with provenance (ensemble sidecars, ingest reports)."""
        path = self.output_dir / f"{sanitize_filename(name)}.json"
        self._save_json(self.provenance(payload), path)
        logger.info(f"Saved report {path}")
        return str(path)

    def _save_json(self, data: Dict[str, Any], file_path: Path) -> None:
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(_jsonable(data), f, indent=2, ensure_ascii=False, sort_keys=True)

    def load_report(self, file_path: Union[str, Path]) -> Dict[str, Any]:
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)


def load_table(file_path: Union[str, Path]) -> pd.DataFrame:
    """Read a table written by ``ReportBuilder.build_table``."""
    return pd.read_csv(file_path)
