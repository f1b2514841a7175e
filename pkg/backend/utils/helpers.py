"""
Utility helper functions for the partition kernel toolkit.
"""

import hashlib
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Union

logger = logging.getLogger(__name__)


def get_file_hash(file_path: Union[str, Path]) -> str:
    """
    Calculate the SHA-256 hash of a file (recorded in ingest provenance).

    Args:
        file_path: Path to the file

    Returns:
        Hex digest
    """
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sanitize_filename(filename: str) -> str:
    """
    Sanitize a name so it can be used as an output file stem.

    Args:
        filename: Original name (dataset reference, kernel label, ...)

    Returns:
        Sanitized name
    """
    name = filename
    invalid_chars = '<>:"/\\|?* '
    for char in invalid_chars:
        name = name.replace(char, '_')

    name = name.strip('._ ')

    if len(name) > 100:
        name = name[:100]

    return name or "unnamed"


def setup_logging(log_level: str = "INFO") -> None:
    """
    Setup logging configuration.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
    """
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def parse_int_list(text: str) -> List[int]:
    """
    Parse a comma separated list of integers ("1,10,200").

    Args:
        text: Comma separated integers

    Returns:
        List of ints
    """
    items = [part.strip() for part in text.split(",") if part.strip()]
    return [int(item) for item in items]


@contextmanager
def timed(label: str) -> Iterator[dict]:
    """
    Measure wall-time of a block.

    Yields a dict whose "seconds" key is filled in when the block exits.
    """
    record = {"label": label, "seconds": 0.0}
    start = time.perf_counter()
    try:
        yield record
    finally:
        record["seconds"] = time.perf_counter() - start
        logger.debug(f"{label} took {record['seconds']:.4f}s")
