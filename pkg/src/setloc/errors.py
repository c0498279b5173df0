"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A computation produced or encountered non-finite values."""


class DatasetFormatError(ValueError):
    """A dataset or checkpoint file is malformed."""
