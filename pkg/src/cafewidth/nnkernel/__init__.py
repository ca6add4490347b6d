"""Numeric engine: masked forward/backward over the supernet plus SGD."""

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import (
    Batch,
    MacCounter,
    SupernetState,
    backward_and_step,
    evaluate,
    full_assignment,
    gradients,
    masked_forward,
    predict,
)

__all__ = [
    "Batch", "MacCounter", "SupernetState", "backward_and_step", "evaluate",
    "full_assignment", "gradients", "kernels", "load_checkpoint", "masked_forward",
    "predict", "save_checkpoint",
]
