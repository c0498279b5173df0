"""setloc: set-prediction temporal action localization on a numpy autodiff core."""

from .errors import ContractError, DatasetFormatError, NumericError, ShapeError
from .tensor import Tensor, backward
from .gradcheck import grad_check

__all__ = [
    "ContractError",
    "DatasetFormatError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "backward",
    "grad_check",
]
