"""Optimizers and learning-rate schedules."""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor


class Adam:
    """Adam with bias correction and optional decoupled weight decay.

    Moment buffers are float32 regardless of parameter dtype; that matches the
    training dtype and keeps checkpoint sizes predictable.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 grad_clip: float | None = None):
        if lr <= 0:
            raise ParameterError("learning rate must be positive")
        if not params:
            raise ParameterError("optimizer needs at least one parameter")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def step(self):
        self.t += 1
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup: int = 0,
              floor: float = 0.0) -> float:
    """Linear warmup then cosine decay to `floor`."""
    if total_steps <= 0:
        raise ParameterError("total_steps must be positive")
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * progress))
