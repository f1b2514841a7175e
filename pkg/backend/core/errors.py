"""
Exception hierarchy for the partition kernel library.
The CLI maps each family to its own exit code.
"""

from typing import Any, Optional


class PartitionKernelError(Exception):
    """Base class for all library errors."""


class DataError(PartitionKernelError):
    """Malformed or inconsistent input data."""


class DimensionError(DataError):
    """Vector or matrix shape does not match the operator."""


class ParameterError(PartitionKernelError):
    """Invalid hyper-parameter or argument value."""


class ResourceError(PartitionKernelError):
    """Requested computation exceeds a configured resource cap."""


class SolverError(PartitionKernelError):
    """Iterative solver failed; carries the solve report for diagnostics."""

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report


class NumericalBreakdownError(SolverError):
    """NaN/Inf or loss of positive-definiteness inside an iteration."""
