from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import LOG_STD_MAX, LOG_STD_MIN, GaussianHead, Mlp, forward
from .optim import Adam, AdamState, Sgd, adam_step
from .tensor import (
    GraphConsumedError,
    NonFiniteError,
    Tensor,
    concat,
    grad_enabled,
    minimum,
    no_grad,
)

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "GaussianHead",
    "GraphConsumedError",
    "LOG_STD_MAX",
    "LOG_STD_MIN",
    "Mlp",
    "NonFiniteError",
    "Tensor",
    "Sgd",
    "adam_step",
    "concat",
    "forward",
    "grad_enabled",
    "load_checkpoint",
    "minimum",
    "no_grad",
    "save_checkpoint",
]
