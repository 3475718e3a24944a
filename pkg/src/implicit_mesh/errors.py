"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class GeometryError(ValueError):
    """Mesh or point data is geometrically unusable."""


class ParseError(ValueError):
    """A text file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(OSError):
    """Input data is missing or malformed on disk."""
