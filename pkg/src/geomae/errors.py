"""Exception types shared across the package."""


class GeoMAEError(Exception):
    """Base class for all package errors."""


class DimensionError(GeoMAEError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(GeoMAEError, ValueError):
    """A precondition on argument values was violated."""


class NonFiniteError(GeoMAEError, FloatingPointError):
    """A NaN or infinity appeared in tensor values."""


class SchemaError(GeoMAEError, ValueError):
    """Dataset or schema file does not match the declared format."""


class EmptyEvaluationError(GeoMAEError, ValueError):
    """No entries were left to score after masking."""


class DivergenceError(GeoMAEError, RuntimeError):
    """Training produced a non-finite loss."""
