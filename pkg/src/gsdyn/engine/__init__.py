from .gradcheck import finite_diff_check
from .optim import AdamState, adam_step
from .tensor import (
    OPS,
    EngineError,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    checked,
    checked_mode,
    current_tape,
    default_dtype,
    no_grad,
    parameter,
    precision,
    record,
    set_checked,
    set_precision,
)

__all__ = [
    "OPS",
    "AdamState",
    "EngineError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "checked",
    "checked_mode",
    "current_tape",
    "default_dtype",
    "finite_diff_check",
    "no_grad",
    "parameter",
    "precision",
    "record",
    "set_checked",
    "set_precision",
]
