"""Small training utilities shared by pre-training, probing and supervised baselines."""
from __future__ import annotations

import math
import random

import numpy as np
import torch


def cosine_factor(step: int, total_steps: int) -> float:
    """Multiplier on the peak learning rate: 1 at step 0, 0 at step ``total_steps - 1``."""
    if total_steps <= 1:
        return 1.0
    progress = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def cosine_scheduler(optimizer: torch.optim.Optimizer,
                     total_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: cosine_factor(step, total_steps))


def global_grad_norm(parameters) -> float:
    grads = [p.grad.detach().double().norm() for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.stack(grads).norm())


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def clip_gradients(parameters, max_norm: float) -> float:
    """Rescale gradients in place to global L2 norm ``<= max_norm``; returns the norm before."""
    parameters = [p for p in parameters if p.grad is not None]
    before = global_grad_norm(parameters)
    if before > max_norm:
        scale = max_norm / before
        for p in parameters:
            p.grad.mul_(scale)
    return before
