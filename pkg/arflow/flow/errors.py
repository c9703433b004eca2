"""Exception hierarchy. The CLI maps each family onto an exit code."""
from __future__ import annotations


class ARFlowError(Exception):
    """Base class for all package errors."""

    exit_code: int = 1


class ShapeError(ARFlowError, ValueError):
    """Dimension mismatch; the message carries the offending shapes."""

    exit_code = 2


class ContractError(ARFlowError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class SingularityError(ContractError):
    """Conversion requested at a time where it is undefined (t = 0)."""


class ConfigError(ARFlowError, ValueError):
    """Unknown or invalid configuration."""

    exit_code = 2


class DataFormatError(ARFlowError, ValueError):
    """Malformed dataset or checkpoint file."""

    exit_code = 3


class NumericError(ARFlowError, ArithmeticError):
    """NaN or Inf detected."""

    exit_code = 4
