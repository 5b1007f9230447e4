"""Minimal tensor library: autodiff, operators, layers, checkpoints."""
from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import ConvParams
from .gradcheck import gradcheck
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    ConvTranspose2d,
    L2Norm,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
)
from .optim import SGD, Adam, step_lr
from .tensor import (
    NonFiniteError,
    Parameter,
    Tensor,
    checked_mode,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_checked,
)
