"""Adam with decoupled weight decay, global-norm clipping, cosine warm restarts."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 5.0) -> tuple[list[np.ndarray], float]:
    """Scale gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm


def lr_schedule(epoch: float, base_lr: float = 1e-4, period: float = 15.0) -> float:
    """Cosine annealing restarted every ``period`` epochs (fractional epochs allowed)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    t = math.fmod(epoch, period)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / period))


@dataclass
class AdamW:
    params: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float | None = 5.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        """Apply one update from the accumulated ``.grad`` fields; returns the pre-clip norm."""
        lr = self.lr if lr is None else lr
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
        if self.clip_norm is not None:
            grads, _ = clip_grad_norm(grads, self.clip_norm)
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
