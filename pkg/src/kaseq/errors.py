"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: UsageError -> 1,
DataFormatError -> 2, NumericError -> 3.
"""


class KaseqError(Exception):
    """Base class for all package errors."""


class ShapeError(KaseqError):
    """Operands have incompatible or invalid shapes."""


class ContractError(KaseqError):
    """A documented precondition was violated by the caller."""


class DegenerateRowError(KaseqError):
    """A softmax/attention row has no unmasked entry."""


class ConfigError(KaseqError):
    """Invalid model or run configuration."""


class DataFormatError(KaseqError):
    """Malformed on-disk artifact (dataset file, checkpoint, config)."""


class UsageError(KaseqError):
    """Bad command-line invocation."""


class NumericError(KaseqError):
    """Non-finite value encountered where finiteness is required."""


class InfeasibleError(ContractError):
    """Assignment problem has no injective solution (fewer columns than rows)."""
