"""Denoising, distillation, sparsity and router-balance losses.

All functions accept torch tensors (and stay differentiable) or numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class LossWeights:
    denoise: float = 1e-4
    out_kd: float = 1.0
    feat_kd: float = 1.0
    ratio: float = 5.0
    balance: float = 1.0
    target_sparsity: float = 0.65
    stability_eps: float = 1e-6
    # weight the denoise term of the hypernet's performance loss by ``denoise``
    weighted_perf_denoise: bool = True

    def __post_init__(self):
        lams = (self.denoise, self.out_kd, self.feat_kd, self.ratio, self.balance)
        if not all(np.isfinite(v) and v >= 0 for v in lams):
            raise ValueError("loss weights must be finite and non-negative")
        if not 0 < self.target_sparsity <= 1:
            raise ValueError("target_sparsity must be in (0, 1]")
        if not self.stability_eps > 0:
            raise ValueError("stability_eps must be positive")


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _mse(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def denoise_loss(eps, eps_hat):
    return _mse(eps_hat, eps)


def out_kd_loss(teacher_eps_hat, student_eps_hat):
    return _mse(student_eps_hat, teacher_eps_hat)


def feat_kd_loss(teacher_features, student_features):
    if len(teacher_features) != len(student_features):
        raise ValueError(
            f"tap count mismatch: {len(teacher_features)} vs {len(student_features)}"
        )
    return sum(_mse(s, t) for t, s in zip(teacher_features, student_features))


def unet_loss(l_denoise, l_out_kd, l_feat_kd, weights: LossWeights):
    return (
        weights.denoise * l_denoise
        + weights.out_kd * l_out_kd
        + weights.feat_kd * l_feat_kd
    )


def sparsity(mask, costs):
    """Cost-weighted active fraction ``sum(m * c) / sum(c)``; batched over
    leading axes of ``mask``."""
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 1 or len(c) == 0 or np.any(c <= 0):
        raise ValueError("costs must be a non-empty vector of positive values")
    if np.shape(mask)[-1] != len(c):
        raise ValueError("mask and cost lengths differ")
    if torch.is_tensor(mask):
        return mask @ torch.as_tensor(c / c.sum(), dtype=mask.dtype)
    return np.asarray(mask, dtype=np.float64) @ (c / c.sum())


def ratio_loss(s, p: float, stability_eps: float = 1e-6):
    """``log(max(S, p) / (min(S, p) + eps))``."""
    s = _t(s)
    p_t = torch.as_tensor(p, dtype=s.dtype)
    return torch.log(torch.maximum(s, p_t) / (torch.minimum(s, p_t) + stability_eps))


def balance_stats(routing_logits):
    """Return ``(F, P)``: argmax fractions (lowest index on ties) and mean
    softmax probabilities per expert over the batch."""
    logits = _t(routing_logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("routing logits must be a non-empty (batch, N_e) array")
    n_e = logits.shape[1]
    counts = torch.bincount(logits.detach().argmax(dim=1), minlength=n_e)
    F = counts.to(logits.dtype) / logits.shape[0]
    P = torch.softmax(logits, dim=1).mean(dim=0)
    return F, P


def balance_loss(routing_logits):
    F, P = balance_stats(routing_logits)
    return len(F) * (F * P).sum()


def balance_from_stats(F, P):
    F, P = _t(F), _t(P)
    return len(F) * (F * P).sum()


def hypernet_loss(l_perf, l_ratio, l_balance, weights: LossWeights):
    return l_perf + weights.ratio * l_ratio + weights.balance * l_balance
