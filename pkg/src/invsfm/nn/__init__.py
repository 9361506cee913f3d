"""Minimal numpy tensor library: autodiff, layers, Adam, checkpoints."""

from . import functional
from .checkpoint import load_adam, load_arrays, load_module, save_adam, save_arrays, save_module
from .layers import BatchNorm2d, Conv2d, Linear, Module, Parameter, xavier_init
from .optim import AdamState, adam_step
from .tensor import Tensor, is_grad_enabled, no_grad

__all__ = [
    "AdamState", "BatchNorm2d", "Conv2d", "Linear", "Module", "Parameter", "Tensor",
    "adam_step", "functional", "is_grad_enabled", "load_adam", "load_arrays", "load_module",
    "no_grad", "save_adam", "save_arrays", "save_module", "xavier_init",
]
