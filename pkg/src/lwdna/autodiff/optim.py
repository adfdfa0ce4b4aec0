"""SGD with momentum and weight decay, plus learning-rate schedules."""

import math
from typing import Dict, List, Sequence

import numpy as np

from ..errors import ConfigError
from ..types import LRSchedule, ScheduleKind
from .tensor import Tensor


class SGD:
    """
    Momentum SGD: v <- mu*v + g + wd*p ; p <- p - lr*v.

    Velocity buffers are keyed by parameter identity and created on first use.
    """

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self, params: Sequence[Tensor]) -> None:
        for p in params:
            if p.grad is None:
                continue
            v = self.velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[id(p)] = v
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    @staticmethod
    def zero_grad(params: Sequence[Tensor]) -> None:
        for p in params:
            p.zero_grad()


def sgd_step(params: Sequence[Tensor], optimizer: SGD) -> None:
    optimizer.step(params)


def milestone_epochs(schedule: LRSchedule, total_epochs: int) -> List[int]:
    return [int(math.floor(fraction * total_epochs)) for fraction in schedule.milestones]


def lr_at(schedule: LRSchedule, epoch: int, base_lr: float, total_epochs: int) -> float:
    """Learning rate for a 0-based epoch."""
    if schedule.kind == ScheduleKind.STEP:
        passed = sum(1 for m in milestone_epochs(schedule, total_epochs) if epoch >= m)
        return base_lr * schedule.factor ** passed
    if total_epochs <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))
