"""AdamW, plain gradient descent, and a one-cycle learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 4e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
            p.data = data.astype(p.dtype, copy=False)


class SGD:
    """Plain gradient descent without momentum state."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = (p.data - self.lr * p.grad).astype(p.dtype, copy=False)


class CycleScheduler:
    """Single triangular cycle: ``lr/10 -> lr`` over the first half, back down over the second."""

    def __init__(self, optimizer, max_lr: float, total_steps: int, floor_ratio: float = 0.1):
        self.optimizer = optimizer
        self.max_lr = max_lr
        self.min_lr = max_lr * floor_ratio
        self.total_steps = max(int(total_steps), 1)
        self.step_num = 0
        optimizer.lr = self.lr_at(0)

    def lr_at(self, step: int) -> float:
        if self.total_steps == 1:
            return self.max_lr
        frac = min(step, self.total_steps - 1) / (self.total_steps - 1)
        height = 1.0 - abs(2.0 * frac - 1.0)
        return self.min_lr + (self.max_lr - self.min_lr) * height

    def step(self) -> float:
        self.step_num += 1
        self.optimizer.lr = self.lr_at(self.step_num)
        return self.optimizer.lr
