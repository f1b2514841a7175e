"""
Versioned binary format for partition ensembles.

Layout:
    b"RPKENS" | uint16 version | uint32 header length | UTF-8 JSON header |
    m * N little-endian int32 labels (partition-major)

The JSON header is written with sorted keys and holds no timestamps, so the
same ensemble and provenance always produce the same bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from core.errors import DataError
from core.partitions import Partition, PartitionEnsemble

logger = logging.getLogger(__name__)

MAGIC = b"RPKENS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<6sHI")


def ensemble_to_bytes(ensemble: PartitionEnsemble, provenance: Dict[str, Any] = None) -> bytes:
    """
    Encode an ensemble and its provenance.

    Args:
        ensemble: Ensemble to encode
        provenance: Extra JSON-serializable metadata (run config, sampler spec)

    Returns:
        Encoded bytes
    """
    max_label = max(p.n_clusters for p in ensemble.partitions) - 1
    if max_label > np.iinfo(np.int32).max:
        raise DataError("Cluster labels exceed the int32 range of the file format")

    header = {
        "format": "partition-ensemble",
        "version": FORMAT_VERSION,
        "m": ensemble.m,
        "n": ensemble.n,
        "dtype": "<i4",
        "provenance": {**ensemble.provenance, **(provenance or {})},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.vstack([p.assignments for p in ensemble.partitions]).astype("<i4").tobytes()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + body


def ensemble_from_bytes(payload: bytes) -> Tuple[PartitionEnsemble, Dict[str, Any]]:
    """
    Decode bytes written by ``ensemble_to_bytes``.

    Returns:
        (ensemble, header); the ensemble carries no extension handles
    """
    if len(payload) < _PREFIX.size:
        raise DataError("Ensemble file is truncated")
    magic, version, header_len = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise DataError("Not a partition ensemble file")
    if version != FORMAT_VERSION:
        raise DataError(f"Unsupported ensemble format version {version}")

    start = _PREFIX.size
    try:
        header = json.loads(payload[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"Corrupt ensemble header: {e}") from e

    m, n = int(header["m"]), int(header["n"])
    body = payload[start + header_len:]
    if len(body) != m * n * 4:
        raise DataError(f"Expected {m * n * 4} label bytes, found {len(body)}")
    labels = np.frombuffer(body, dtype="<i4").reshape(m, n).astype(np.int64)
    partitions = [Partition(row) for row in labels]
    return PartitionEnsemble(partitions, provenance=header.get("provenance", {})), header


def save_ensemble(
    ensemble: PartitionEnsemble,
    path: Union[str, Path],
    provenance: Dict[str, Any] = None,
) -> str:
    """Write an ensemble file and return its path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ensemble_to_bytes(ensemble, provenance))
    logger.info(f"Saved ensemble (m={ensemble.m}, N={ensemble.n}) to: {path}")
    return str(path)


def load_ensemble(path: Union[str, Path]) -> Tuple[PartitionEnsemble, Dict[str, Any]]:
    """Read an ensemble file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Ensemble file not found: {path}")
    ensemble, header = ensemble_from_bytes(path.read_bytes())
    logger.info(f"Loaded ensemble (m={ensemble.m}, N={ensemble.n}) from: {path}")
    return ensemble, header
