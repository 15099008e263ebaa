"""Differentiable numeric primitives and gradient checking."""
from .functional import (ShapeError, bilinear_sample, conv2d, group_norm, layer_norm, linear,
                         mlp_forward, normalize, softmax)
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .module import MLP, Conv2d, GroupNorm, LayerNorm, Linear, Module, Param
from .tensor import Tensor, as_tensor, concat, exp, log, no_grad, relu, sqrt, stack

__all__ = [
    "ShapeError", "bilinear_sample", "conv2d", "group_norm", "layer_norm", "linear",
    "mlp_forward", "normalize", "softmax", "GradCheckError", "GradCheckReport", "grad_check",
    "MLP", "Conv2d", "GroupNorm", "LayerNorm", "Linear", "Module", "Param", "Tensor",
    "as_tensor", "concat", "exp", "log", "no_grad", "relu", "sqrt", "stack",
]
