from .core import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    gather_rows,
    grad_enabled,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    stack,
    tanh,
    transpose,
)
from .gradcheck import NondeterministicOpError, finite_diff_check
from .ops import (
    BatchNormState,
    ConvSpec,
    batchnorm,
    conv3d,
    dropout,
    dropout_shared_mask,
    linear,
    log_softmax,
    maxpool3d,
    softmax,
    softmax_cross_entropy,
)

__all__ = [
    "BatchNormState",
    "ConvSpec",
    "NonFiniteError",
    "NondeterministicOpError",
    "Tensor",
    "add",
    "as_tensor",
    "batchnorm",
    "concat",
    "conv3d",
    "dropout",
    "dropout_shared_mask",
    "finite_diff_check",
    "gather_rows",
    "grad_enabled",
    "linear",
    "log_softmax",
    "matmul",
    "maxpool3d",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "stack",
    "tanh",
    "transpose",
]
