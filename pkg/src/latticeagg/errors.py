"""Exception types raised across the package."""


class LatticeAggError(Exception):
    """Base class for all package errors."""


class MissingValueUnsupported(LatticeAggError):
    """A missing input reached a calibrator without a missing-value output."""


class ShapeError(LatticeAggError, ValueError):
    """Input dimensionality does not match the component."""


class ProjectionFailure(LatticeAggError):
    """Projection did not reach a feasible point within its sweep budget."""


class MissingToken(LatticeAggError, KeyError):
    """A token is absent from a precomputed score table."""


class LabelError(LatticeAggError, ValueError):
    """A label is invalid for the requested loss."""


class DivergenceError(LatticeAggError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(LatticeAggError, ValueError):
    """Invalid configuration or arguments."""


class ParseError(LatticeAggError, ValueError):
    """Malformed input record."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(LatticeAggError, ValueError):
    """Data does not match the declared schema or model dimensionality."""


class BudgetError(LatticeAggError):
    """Subset enumeration exceeded the per-example budget."""
