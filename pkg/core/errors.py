"""Exception hierarchy. Each error carries the CLI exit code it maps to."""

from typing import Optional


class LagatError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 2


class ConfigError(LagatError):
    """Unknown key, malformed value or missing required setting."""

    exit_code = 1

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = ""
        if key is not None:
            where += f" key '{key}'"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{message}{':' if where else ''}{where}")


class UsageError(ConfigError):
    """Command-line misuse."""


class DataError(LagatError):
    """Input data missing or failing validation."""


class SchemaError(DataError):
    """CSV header does not match the canonical schema, or schemas were mixed."""

    def __init__(self, message: str, column: Optional[str] = None):
        self.column = column
        super().__init__(message if column is None else f"{message}: column '{column}'")


class RowError(DataError):
    """A data row could not be parsed."""

    def __init__(self, message: str, line: int, column: Optional[str] = None):
        self.line = line
        self.column = column
        col = f" column '{column}'" if column else ""
        super().__init__(f"{message} at line {line}{col}")


class InsufficientPopulationError(DataError):
    """Too few vehicles to form a train/validation/test split."""


class CheckpointError(DataError):
    """Checkpoint container unreadable or incompatible with the model config."""


class ModelInputError(DataError):
    """Tensor input rejected by the model (non-finite values, unknown target, bad lane code)."""
