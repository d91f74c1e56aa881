from . import ops
from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import elementwise, matmul, softmax
from .tensor import Tape, Tensor, active_tape, as_tensor, backward, no_tape

__all__ = [
    "GradCheckReport",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "elementwise",
    "grad_check",
    "matmul",
    "no_tape",
    "ops",
    "relative_error",
    "softmax",
]
