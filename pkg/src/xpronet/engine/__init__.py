from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, finite_diff_check
from .optim import Adam, AdamState, ParamGroup
from .tensor import ContractError, NumericError, ShapeError, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "ContractError",
    "GradCheckReport",
    "NumericError",
    "ParamGroup",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "finite_diff_check",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
]
