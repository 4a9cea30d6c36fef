"""
Exception hierarchy for the PSCDAE workbench.

Each error class carries the CLI exit code it maps to, so `cli.main` can turn
any failure into the right process status without a lookup table.
"""
from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class WorkbenchError(Exception):
    """Base class for every error raised by the workbench."""
    exit_code = EXIT_DATA


class ConfigError(WorkbenchError):
    """Invalid configuration, anchored to a source line when one is known."""
    exit_code = EXIT_USAGE

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.message = message
        self.line = line
        self.source = source
        super().__init__(self.__str__())

    def __str__(self) -> str:
        where = self.source or "<config>"
        if self.line is not None:
            return f"{where}:{self.line}: {self.message}"
        return f"{where}: {self.message}"


class DataError(WorkbenchError, ValueError):
    """Rejected input: wrong shape, wrong length, unknown name, empty split."""
    exit_code = EXIT_DATA


class SyncError(DataError):
    """Preamble correlation peak fell below the detection threshold."""

    def __init__(self, metric: float, threshold: float):
        self.metric = metric
        self.threshold = threshold
        super().__init__(f"sync failed: metric {metric:.4f} below threshold {threshold:.4f}")


class NumericalError(WorkbenchError, ArithmeticError):
    """Non-finite loss or gradient during training."""
    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, batch_index: Optional[int] = None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)
