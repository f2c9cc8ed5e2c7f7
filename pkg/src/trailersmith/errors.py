"""
Error handling utilities for trailersmith.

This module provides the exception hierarchy shared by every pipeline stage,
the `handle_errors` decorator used at I/O boundaries and the mapping from
exceptions to CLI exit codes.
"""

from typing import Optional, Any, Dict, Type
import functools
import logging

# Package logger; modules use children of it (trailersmith.trainer, ...)
logger = logging.getLogger("trailersmith")

# Exit codes of the command line front end
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


# Base exception class for all trailersmith errors
class TrailersmithError(Exception):
    """Base exception class for all trailersmith errors."""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        if self.details:
            details_str = ", ".join(f"{k}={v}" for k, v in self.details.items())
            return f"{self.message} ({details_str})"
        return self.message


class ConfigError(TrailersmithError):
    """Error related to configuration settings or missing experiment inputs."""
    pass


class ValidationError(TrailersmithError):
    """Error related to data validation (manifests, boundary and split files)."""
    pass


class FormatError(ValidationError):
    """Binary file with a bad magic string or an unsupported version."""
    pass


class LengthError(ValidationError):
    """Binary payload shorter or longer than its header declares."""
    pass


class DataError(ValidationError):
    """Non-finite or otherwise unusable numeric data."""
    pass


class DimensionError(TrailersmithError, ValueError):
    """Shape or width mismatch between operands."""
    pass


class ArgumentError(TrailersmithError, ValueError):
    """Invalid argument value (zero clip length, non-divisible frame rates, ...)."""
    pass


class UndefinedMetricError(TrailersmithError):
    """A metric is undefined for the given labels (no positives)."""
    pass


class TrainingError(TrailersmithError):
    """Numeric failure during optimization."""
    pass


class StorageError(TrailersmithError):
    """Error reading or writing an artifact on disk."""
    pass


_EXIT_CODES = (
    (TrainingError, EXIT_NUMERIC),
    (UndefinedMetricError, EXIT_NUMERIC),
    (FloatingPointError, EXIT_NUMERIC),
    (StorageError, EXIT_IO),
    (OSError, EXIT_IO),
    (TrailersmithError, EXIT_VALIDATION),
)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    for error_type, code in _EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return EXIT_VALIDATION


# Helper function to standardize error handling
def handle_errors(error_type: Optional[Type[TrailersmithError]] = None, log_error: bool = True):
    """
    Decorator to handle errors in a consistent way.

    Args:
        error_type: If specified, foreign exceptions will be converted to this type.
                   Errors that are already trailersmith errors are re-raised as-is.
        log_error: Whether to log errors.

    Returns:
        The decorator function.
    """
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except TrailersmithError:
                raise
            except Exception as e:
                if log_error:
                    logger.debug(f"Error in {func.__name__}: {str(e)}", exc_info=True)

                if error_type is None:
                    raise

                error_data = {
                    "exception_type": type(e).__name__
                }
                if hasattr(e, "details") and isinstance(e.details, dict):
                    error_data.update(e.details)

                raise error_type(str(e), error_data) from e
        return wrapper
    return decorator
