from .ops import (
    add,
    clamp,
    conv2d,
    kl_div_batchmean,
    linear,
    log_softmax,
    maxpool2,
    mean_all,
    mul,
    one_hot,
    relu,
    reshape,
    square,
    sub,
    sum_all,
    sum_rows,
    take_rows,
    tanh,
)
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .tensor import DEFAULT_DTYPE, Tensor, as_array, tensor

__all__ = [
    "AdamState",
    "CosineSchedule",
    "DEFAULT_DTYPE",
    "Tensor",
    "adam_step",
    "add",
    "as_array",
    "clamp",
    "conv2d",
    "cosine_lr",
    "kl_div_batchmean",
    "linear",
    "log_softmax",
    "maxpool2",
    "mean_all",
    "mul",
    "one_hot",
    "relu",
    "reshape",
    "square",
    "sub",
    "sum_all",
    "sum_rows",
    "take_rows",
    "tanh",
    "tensor",
]
