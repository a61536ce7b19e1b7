"""AdamW with decoupled weight decay and a warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 5
    epochs: int = 100
    min_lr_ratio: float = 0.0
    grad_clip: float = 1.0


def cosine_lr(step, total_steps, warmup_steps, base_lr, min_lr_ratio=0.0):
    """Linear warm-up to ``base_lr`` then cosine decay to ``min_lr_ratio * base_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    floor = base_lr * min_lr_ratio
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay is applied only to parameters with ndim >= 2."""

    def __init__(self, named_params, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8, grad_clip=None):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named]
        self.v = [np.zeros_like(p.data) for _, p in self.named]

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def grad_norm(self):
        tot = 0.0
        for _, p in self.named:
            if p.grad is not None:
                tot += float((p.grad * p.grad).sum())
        return math.sqrt(tot)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.named:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in {name}; step aborted")
        scale = 1.0
        if self.grad_clip:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (name, p), m, v in zip(self.named, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
