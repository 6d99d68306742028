from .tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    is_grad_enabled,
    no_grad,
    reset_tape,
)
from .ops import ConvSpec, ShapeError
from .gradcheck import finite_diff_check
from . import ops, archive

__all__ = [
    "ConvSpec", "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor",
    "archive", "as_tensor", "backward", "current_tape", "finite_diff_check",
    "is_grad_enabled", "no_grad", "ops", "reset_tape",
]
