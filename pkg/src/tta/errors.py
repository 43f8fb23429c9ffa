"""Exception hierarchy shared across the package.

ConfigError maps to CLI exit code 2, everything else under TtaError to 3.
"""


class TtaError(Exception):
    """Base class for all package errors."""


class ConfigError(TtaError):
    """Invalid configuration value or unusable CLI invocation."""


class ContractError(TtaError):
    """An operation was called with arguments violating its preconditions."""


class ShapeError(ContractError):
    """Tensor dimensions incompatible with the requested operation."""


class TrainingError(TtaError):
    """Training diverged or otherwise failed; carries diagnostics in args."""


class GuidanceError(TtaError):
    """Classifier guidance produced unusable (non-finite) gradients."""


class TraceSchemaError(TtaError):
    """A generation trace is missing fields or malformed."""


class MetricsError(TtaError):
    """A metric is undefined for the given inputs (e.g. constant series)."""
