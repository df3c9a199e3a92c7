class PolarSfPError(Exception):
    """Base class for errors raised by this package."""


class DomainError(PolarSfPError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DimensionError(PolarSfPError, ValueError):
    """Array shapes are incompatible."""


class ConfigurationError(PolarSfPError, ValueError):
    """Invalid or inconsistent configuration."""


class NoValidPixelsError(PolarSfPError, ValueError):
    """A reduction was requested over an empty mask."""


class NumericalError(PolarSfPError, ArithmeticError):
    """Numerical failure, e.g. a NaN loss during training."""
