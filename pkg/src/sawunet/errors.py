"""Exception types shared across the package."""


class SawuError(Exception):
    """Base class for all package errors."""


class DimensionError(SawuError, ValueError):
    """Operand shapes do not conform."""


class DomainError(SawuError, ValueError):
    """An input lies outside the domain of a function (zero vector, negative root)."""


class NonFiniteError(SawuError, FloatingPointError):
    """An operation produced NaN or Inf."""


class UsageError(SawuError, ValueError):
    """Invalid arguments or configuration."""


class TrainingError(SawuError, RuntimeError):
    """Training hit a non-finite loss or gradient."""


class CubeFormatError(SawuError, IOError):
    """A data file is malformed, truncated or holds non-finite values."""


class DegenerateDataError(SawuError, ValueError):
    """Input data has no spread to extract structure from."""
