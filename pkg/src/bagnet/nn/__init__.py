from .checkpoint import load_params, save_params
from .gradcheck import grad_check
from .ops import (
    Segments,
    bce,
    concat,
    conv1d,
    conv1d_narrow,
    kmax,
    kmax_pool,
    log_softmax,
    matmul,
    relu,
    segment_max,
    segment_mean,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax,
    tanh,
)
from .optim import AdaGrad, sgd_step
from .tensor import DimensionError, NumericalError, Parameter, Tensor

__all__ = [
    "AdaGrad", "DimensionError", "NumericalError", "Parameter", "Segments", "Tensor",
    "bce", "concat", "conv1d", "conv1d_narrow", "grad_check", "kmax", "kmax_pool",
    "load_params", "log_softmax", "matmul", "relu", "save_params", "segment_max",
    "segment_mean", "segment_softmax", "segment_sum", "sgd_step", "sigmoid", "softmax",
    "tanh",
]
