"""Dense-tensor autodiff core: tensors, tape, ops, AdamW, lr schedule, checkpoints."""

from .checkpoint import (
    CheckpointError,
    load_params_into,
    optimizer_entries,
    params_to_arrays,
    read_checkpoint,
    restore_optimizer,
    write_checkpoint,
)
from .optim import AdamWState, LrSchedule, adamw_step, lr_at
from .tensor import (
    GradGraph,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    constant,
    dropout,
    exp,
    gelu,
    grads_by_name,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    pairwise_euclidean,
    parameter,
    reshape,
    sigmoid,
    sqrt,
    sub,
    take,
    tanh,
    tensor_sum,
    tile_leading,
    transpose,
)

__all__ = [
    "AdamWState",
    "CheckpointError",
    "GradGraph",
    "LrSchedule",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "concat",
    "constant",
    "dropout",
    "exp",
    "gelu",
    "grads_by_name",
    "layer_norm",
    "load_params_into",
    "log",
    "lr_at",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "optimizer_entries",
    "pairwise_euclidean",
    "parameter",
    "params_to_arrays",
    "read_checkpoint",
    "reshape",
    "restore_optimizer",
    "sigmoid",
    "sqrt",
    "sub",
    "take",
    "tanh",
    "tensor_sum",
    "tile_leading",
    "transpose",
    "write_checkpoint",
]
