"""SGD with momentum, weight decay, and a cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, cosine_lr


class SGD:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr(t)*v.

    lr(t) = base_lr * 0.5 * (1 + cos(pi * t / total_steps)). Gradients are
    zeroed after each step.
    """

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        base_lr: float,
        total_steps: int,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
    ):
        if total_steps <= 0:
            raise ContractViolation("total_steps must be positive")
        self.params = list(params)
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def lr_at(self, step: int) -> float:
        return cosine_lr(self.base_lr, step, self.total_steps)

    def step(self, step_index: int) -> float:
        """Apply one update at schedule position ``step_index``; returns the lr used."""
        lr = self.lr_at(step_index)
        for name, p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= lr * v
            p.grad = None
        return lr
