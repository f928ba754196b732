"""AdamW with decoupled weight decay, warmup-cosine schedule, gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class AdamW:
    """Decoupled weight decay Adam over a list of parameter tensors.

    Update per step: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`` with
    bias-corrected first/second moments.
    """

    def __init__(self, params, lr: float = 5e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        """Apply one update using each parameter's accumulated ``.grad``."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise ValueError("AdamW: non-finite gradient")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``base_lr`` followed by cosine decay to ``base_lr * floor_ratio``."""

    base_lr: float
    total_epochs: float
    warmup_epochs: float = 2.0
    floor_ratio: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.floor_ratio <= 1.0:
            raise ValueError(f"floor_ratio must be in (0, 1], got {self.floor_ratio}")
        if not 0.0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"need 0 <= warmup ({self.warmup_epochs}) < total ({self.total_epochs})")


def lr_at(schedule: LrSchedule, epoch_fraction: float) -> float:
    """Learning rate at a (possibly fractional) epoch position."""
    if not 0.0 <= epoch_fraction <= schedule.total_epochs:
        raise ValueError(f"epoch_fraction {epoch_fraction} outside [0, {schedule.total_epochs}]")
    if epoch_fraction < schedule.warmup_epochs:
        return schedule.base_lr * epoch_fraction / schedule.warmup_epochs
    progress = (epoch_fraction - schedule.warmup_epochs) / (schedule.total_epochs - schedule.warmup_epochs)
    shape = 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.base_lr * (schedule.floor_ratio + (1.0 - schedule.floor_ratio) * shape)


def clip_grad_norm(grads, max_norm: float = 5.0):
    """Scale a list of gradient arrays so the global L2 norm is <= max_norm.

    Returns ``(scaled_grads, total_norm)``; inputs are not modified.
    """
    arrays = [g.grad if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    total = math.sqrt(sum(float((a * a).sum()) for a in arrays if a is not None))
    if total <= max_norm or total == 0.0:
        return [None if a is None else a.copy() for a in arrays], total
    scale = max_norm / total
    return [None if a is None else a * scale for a in arrays], total


def clip_gradients_(params, max_norm: float = 5.0) -> float:
    """In-place version of :func:`clip_grad_norm` over parameters' ``.grad``."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
