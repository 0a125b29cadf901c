from .functional import (
    ShapeError,
    batch_statistics,
    concat,
    conv2d,
    conv_transpose2d,
    instance_norm,
    log_softmax,
    mean_pool2,
    softmax,
    upsample_bilinear,
    upsample_nearest,
)
from .gradcheck import GradCheckReport, grad_check, numeric_grad, relative_error
from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, is_grad_enabled, no_grad, tensor

__all__ = [
    "Tensor", "tensor", "no_grad", "is_grad_enabled", "ShapeError",
    "conv2d", "conv_transpose2d", "mean_pool2", "upsample_nearest", "upsample_bilinear",
    "concat", "softmax", "log_softmax", "instance_norm", "batch_statistics",
    "GradCheckReport", "grad_check", "numeric_grad", "relative_error", "KERNEL_BACKEND",
]
