"""Optimizers, learning-rate schedule and gradient clipping over ParameterStore parameters."""
import math
from typing import Dict, Iterable, List

import numpy as np

from ml.tensor import Parameter
from models import OptimizerKind
from schemas import TrainConfig


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float, warmup_fraction: float) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr at the last step."""
    if total_steps <= 0:
        return base_lr
    warmup = int(round(warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup - 1)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(parameters: Iterable[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    parameters = [p for p in parameters if p.grad is not None]
    total_norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in parameters))
    if total_norm > max_norm:
        clip_coef = max_norm / (total_norm + 1e-6)
        for p in parameters:
            p.grad = p.grad * clip_coef
    return total_norm


class SGD:
    """Momentum SGD with optional L2 weight decay folded into the gradient."""

    def __init__(self, params: List[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.momentum * self.velocity[p.name] + g
            self.velocity[p.name] = v
            p.data = p.data - self.lr * v


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: List[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            m = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * p.grad
            v = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * p.grad * p.grad
            self.m[p.name], self.v[p.name] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update


def build_optimizer(params: List[Parameter], config: TrainConfig):
    if config.optimizer == OptimizerKind.ADAMW:
        return AdamW(params, config.lr, weight_decay=config.weight_decay)
    return SGD(params, config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
