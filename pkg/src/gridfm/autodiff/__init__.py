"""Minimal reverse-mode automatic differentiation over dense float64 arrays."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, grad_of

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "grad_of",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
]
