"""Differentiable-tensor substrate: tensors, reverse-mode gradients, layers,
Adam, and the finite-difference oracle."""

from condflow.numerics.tensor import (
    Parameter,
    Tensor,
    add,
    arctan,
    as_tensor,
    concat,
    conv2d,
    div,
    exp,
    grad_enabled,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    set_finite_checks,
    square,
    sub,
    sum_,
    take,
    transpose,
)
from condflow.numerics.gradcheck import finite_difference_gradient, max_relative_error
from condflow.numerics.nets import (
    BatchNorm2d,
    Conv2d,
    ConvNet,
    Linear,
    MLP,
    build_subnet,
    forward_eval,
    xavier_uniform,
)
from condflow.numerics.optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "ConvNet", "Linear", "MLP",
    "Parameter", "Tensor", "adam_step", "add", "arctan", "as_tensor",
    "build_subnet", "concat", "conv2d", "div", "exp",
    "finite_difference_gradient", "forward_eval", "grad_enabled",
    "leaky_relu", "log", "matmul", "max_relative_error", "mean", "mul",
    "no_grad", "power", "relu", "reshape", "set_finite_checks", "square",
    "sub", "sum_", "take", "transpose", "xavier_uniform",
]
