"""Optimizers, learning-rate schedules and global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor import Tensor


def lr_at(step: int, base_lr: float, total_steps: int, warmup_steps: int) -> float:
    """Linear warm-up from 0 to ``base_lr`` then half-cosine decay towards 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def step_decay_lr(step: int, base_lr: float, total_steps: int, milestones=(0.5, 0.75), gamma: float = 0.1) -> float:
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    drops = sum(step >= int(m * total_steps) for m in milestones)
    return base_lr * gamma**drops


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> Tuple[List[np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when the joint L2 norm exceeds it.

    Returns the (possibly) rescaled gradients and the pre-clipping norm.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Classical momentum: v <- momentum * v + g; p <- p - lr * v."""
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g
        new_velocity.append(v)
        new_params.append(p - lr * v)
    return new_params, new_velocity


class Adam:
    """Adam with bias correction; the learning rate may be changed between steps."""

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """Momentum SGD over named tensors, backed by :func:`sgd_step`."""

    def __init__(self, lr: float = 1e-3, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
        names = list(grads)
        vel = [self.velocity.get(n, np.zeros_like(params[n].data)) for n in names]
        new_p, new_v = sgd_step([params[n].data for n in names], [grads[n] for n in names], vel, self.lr, self.momentum)
        for n, p, v in zip(names, new_p, new_v):
            params[n].data = p
            self.velocity[n] = v
