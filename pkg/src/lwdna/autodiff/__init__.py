"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .tensor import Tensor, Tape, Node, active_tape, backward
from .optim import SGD, sgd_step, lr_at, milestone_epochs
from . import functional

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "active_tape",
    "backward",
    "SGD",
    "sgd_step",
    "lr_at",
    "milestone_epochs",
    "functional",
]
