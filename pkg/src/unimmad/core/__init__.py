from .autograd import (
    Gradients,
    GradTape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    getitem,
    log,
    maximum,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sg,
    sqrt,
    stack,
    stop_gradient,
    sub,
    take,
    transpose,
    tsum,
)
from .gradcheck import check_gradients, relative_error
from .ops import compose, conv2d, gap, gaussian_blur, softmax, upsample_bilinear, upsample_nearest

__all__ = [
    "Gradients",
    "GradTape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "check_gradients",
    "compose",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gap",
    "gaussian_blur",
    "getitem",
    "log",
    "maximum",
    "mean",
    "mul",
    "neg",
    "power",
    "relative_error",
    "relu",
    "reshape",
    "sg",
    "softmax",
    "sqrt",
    "stack",
    "stop_gradient",
    "sub",
    "take",
    "transpose",
    "tsum",
    "upsample_bilinear",
    "upsample_nearest",
]
