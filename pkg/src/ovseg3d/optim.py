"""AdamW with decoupled weight decay and a cyclical (cosine-restart) LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Standard AdamW: bias-corrected moments, weight decay applied directly
    to the parameter (not through the gradient)."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """One update over all parameters; every parameter must hold a grad."""
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} has no gradient; run backward() first")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1**t)
            v_hat = self.v[i] / (1.0 - b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay != 0.0:
                p.data = p.data - self.lr * self.weight_decay * p.data

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_restart_lr(base_lr: float, step: int, period: int, min_lr: float = 0.0) -> float:
    """Cosine decay restarting every ``period`` steps; period = total steps
    gives a single ramp."""
    if period <= 0:
        raise ValueError("schedule period must be positive")
    t = step % period
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / period))
