from .functional import (
    BatchNormState,
    ConvSpec,
    LossValue,
    add,
    avg_pool2d,
    batch_norm2d,
    bilinear_resize,
    concat,
    conv2d,
    max_pool2d,
    mul,
    pool2d,
    relu,
    softmax_cross_entropy,
)
from .gradcheck import GradCheckReport, GradCheckResult, check_tensors, grad_check, relative_error
from .tensor import Tensor, check_finite, is_grad_enabled, no_grad

__all__ = [
    "BatchNormState", "ConvSpec", "GradCheckReport", "GradCheckResult", "LossValue", "Tensor",
    "add", "avg_pool2d", "batch_norm2d", "bilinear_resize", "check_finite", "check_tensors",
    "concat", "conv2d", "grad_check", "is_grad_enabled", "max_pool2d", "mul", "no_grad",
    "pool2d", "relative_error", "relu", "softmax_cross_entropy",
]
