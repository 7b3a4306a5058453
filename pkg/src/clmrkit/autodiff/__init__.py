"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .functional import (BatchNormState, batchnorm1d, binary_cross_entropy_with_logits, conv1d,
                         global_avg_pool, l2_normalize, linear, logsumexp, maxpool1d, relu,
                         sigmoid)
from .gradcheck import gradcheck, numerical_grad, relative_error
from .io import load_tensors, save_tensors
from .optim import Adam, AdamState, adam_step, kaiming_init
from .tensor import Tensor, tensor

__all__ = [
    "Adam", "AdamState", "BatchNormState", "Tensor", "adam_step", "batchnorm1d",
    "binary_cross_entropy_with_logits", "conv1d", "global_avg_pool", "gradcheck",
    "kaiming_init", "l2_normalize", "linear", "load_tensors", "logsumexp", "maxpool1d",
    "numerical_grad", "relative_error", "relu", "save_tensors", "sigmoid", "tensor",
]
