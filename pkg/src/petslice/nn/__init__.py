"""Minimal NCHW layer library with hand-derived backward passes."""

from .functional import ShapeError, sigmoid
from .layers import (
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool2d,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    ResidualBlock,
    Sequential,
)
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "GlobalAvgPool2d", "GradCheckReport",
    "Linear", "MaxPool2d", "Module", "NonFiniteGradientError", "ReLU", "ResidualBlock",
    "Sequential", "ShapeError", "adam_step", "grad_check", "sigmoid",
]
