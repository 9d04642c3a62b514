"""Pairwise sigmoid alignment loss between single-lead and multi-lead embeddings.

For a batch of B matched pairs with similarities ``sim[i, j] = <S_i, M_j>``::

    loss = (1 / B) * sum_ij softplus(z_ij * (-t * sim_ij + b))

with ``z = +1`` on the diagonal and ``-1`` elsewhere.  The sum runs over all
B^2 pairs but is divided by B, so the loss grows roughly linearly with the
batch size.  ``softplus`` keeps the evaluation finite for any logit size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import expit

from .encoder import EmbeddingBatch
from .errors import BatchMismatch


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    bias: float = 0.0
    learnable_temperature: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def label_matrix(n: int, dtype=torch.int64) -> torch.Tensor:
    return 2 * torch.eye(n, dtype=dtype) - 1


def _unwrap(x) -> tuple[torch.Tensor, list[str] | None]:
    if isinstance(x, EmbeddingBatch):
        v, ids = x.vectors, x.record_ids
    else:
        v, ids = x, None
    if not isinstance(v, torch.Tensor):
        v = torch.as_tensor(np.asarray(v, dtype=np.float64))
    if v.ndim != 2:
        raise BatchMismatch(f"embeddings must be [B x D], got shape {tuple(v.shape)}")
    return v, ids


def _check_pair(S, M):
    s, s_ids = _unwrap(S)
    m, m_ids = _unwrap(M)
    if s.shape != m.shape:
        raise BatchMismatch(f"S has shape {tuple(s.shape)} but M has {tuple(m.shape)}")
    if s_ids is not None and m_ids is not None and s_ids != m_ids:
        raise BatchMismatch("S and M record ids are not aligned index-for-index")
    if s.shape[0] < 1:
        raise BatchMismatch("empty batch")
    if m.dtype != s.dtype:
        m = m.to(s.dtype)
    return s, m


def similarity_matrix(S, M) -> torch.Tensor:
    s, m = _check_pair(S, M)
    return s @ m.T


def siglip_loss(S, M, config: LossConfig = LossConfig(),
                temperature: torch.Tensor | float | None = None) -> torch.Tensor:
    """Scalar sigmoid alignment loss; differentiable w.r.t. ``S``, ``M`` and ``temperature``."""
    sim = similarity_matrix(S, M)
    t = config.temperature if temperature is None else temperature
    z = label_matrix(sim.shape[0], dtype=sim.dtype)
    logits = z * (-t * sim + config.bias)
    return F.softplus(logits).sum() / sim.shape[0]


class SigmoidAlignLoss(nn.Module):
    """Loss module; the temperature is stored as ``log_temperature`` so it stays positive."""

    def __init__(self, config: LossConfig = LossConfig()):
        super().__init__()
        self.config = config
        log_t = torch.tensor(math.log(config.temperature), dtype=torch.float64)
        if config.learnable_temperature:
            self.log_temperature = nn.Parameter(log_t)
        else:
            self.register_buffer("log_temperature", log_t)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def forward(self, S, M) -> torch.Tensor:
        s, _ = _unwrap(S)
        return siglip_loss(S, M, self.config, self.temperature.to(s.dtype))


def siglip_loss_np(S: np.ndarray, M: np.ndarray, config: LossConfig = LossConfig(),
                   normalize: bool = False) -> float:
    S, M = np.asarray(S, dtype=np.float64), np.asarray(M, dtype=np.float64)
    if normalize:
        S = S / np.linalg.norm(S, axis=1, keepdims=True)
        M = M / np.linalg.norm(M, axis=1, keepdims=True)
    sim = S @ M.T
    n = sim.shape[0]
    z = 2.0 * np.eye(n) - 1.0
    return float(np.logaddexp(0.0, z * (-config.temperature * sim + config.bias)).sum() / n)


def _normalize_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / norm
    return (grad_unit - unit * (grad_unit * unit).sum(axis=1, keepdims=True)) / norm


def siglip_grad(S: np.ndarray, M: np.ndarray, config: LossConfig = LossConfig(),
                normalize: bool = False) -> dict[str, np.ndarray | float]:
    """Closed-form gradients of the loss w.r.t. ``S``, ``M`` and the temperature.

    ``dL/dsim_ij = (1/B) * (-t z_ij) * sigmoid(z_ij (-t sim_ij + b))``, chained
    through the inner product and, when ``normalize`` is set, through the
    row-wise L2 normalisation of the raw inputs.  ``log_temperature`` is the
    gradient w.r.t. the log-parameterised temperature used when it is learnable.
    """
    S_raw, M_raw = np.asarray(S, dtype=np.float64), np.asarray(M, dtype=np.float64)
    if S_raw.shape != M_raw.shape:
        raise BatchMismatch(f"S has shape {S_raw.shape} but M has {M_raw.shape}")
    s, m = S_raw, M_raw
    if normalize:
        s = S_raw / np.linalg.norm(S_raw, axis=1, keepdims=True)
        m = M_raw / np.linalg.norm(M_raw, axis=1, keepdims=True)
    n = s.shape[0]
    t, b = config.temperature, config.bias
    sim = s @ m.T
    z = 2.0 * np.eye(n) - 1.0
    sig = expit(z * (-t * sim + b))
    g_sim = sig * (-t * z) / n
    g_s = g_sim @ m
    g_m = g_sim.T @ s
    if normalize:
        g_s = _normalize_backward(S_raw, g_s)
        g_m = _normalize_backward(M_raw, g_m)
    g_t = float((sig * (-z * sim)).sum() / n)
    return {"S": g_s, "M": g_m, "sim": g_sim, "temperature": g_t, "log_temperature": g_t * t}
