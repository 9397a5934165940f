from .gradcheck import GradCheckReport, GradFailure, gradient_check
from .ops import avgpool2d, cdc_conv2d, concat, conv2d, flatten, linear, relu, sigmoid
from .serialize import FormatError, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    Graph,
    NonFiniteError,
    Tensor,
    TensorError,
    backward,
    clip,
    debug_enabled,
    exp,
    grad,
    log,
    set_debug,
)

__all__ = [
    "Graph", "GradCheckReport", "GradFailure", "FormatError", "NonFiniteError", "Tensor",
    "TensorError", "avgpool2d", "backward", "cdc_conv2d", "clip", "concat", "conv2d",
    "debug_enabled", "exp", "flatten", "grad", "gradient_check", "linear", "load_tensor",
    "log", "relu", "save_tensor", "set_debug", "sigmoid", "tensor_from_bytes", "tensor_to_bytes",
]
