"""Analytic MAC accounting for the prunable denoiser."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from torch import nn

from .diffusion import Denoiser, DenoiserConfig


@dataclass(frozen=True)
class CostModel:
    layer_costs: tuple  # MACs per item for each prunable block
    fixed_cost: int     # MACs per item for projections

    def __post_init__(self):
        costs = tuple(int(c) for c in self.layer_costs)
        if not costs or min(costs) <= 0 or self.fixed_cost < 0:
            raise ValueError("layer costs must be positive")
        object.__setattr__(self, "layer_costs", costs)

    @property
    def costs(self) -> np.ndarray:
        return np.asarray(self.layer_costs, dtype=np.int64)

    @property
    def dense_macs(self) -> int:
        return self.fixed_cost + int(self.costs.sum())


def linear_macs(module: nn.Module) -> int:
    """Sum of ``in * out`` over every ``nn.Linear`` inside ``module``."""
    return sum(
        m.in_features * m.out_features for m in module.modules() if isinstance(m, nn.Linear)
    )


def profile_costs(model) -> CostModel:
    """Per-block MACs for a ``Denoiser`` (or a ``DenoiserConfig``)."""
    if isinstance(model, DenoiserConfig):
        model = Denoiser(model)
    layer = [linear_macs(b) for b in model.blocks]
    fixed = linear_macs(model) - sum(layer)
    return CostModel(tuple(layer), fixed)


def _check_binary(mask, n):
    mask = np.asarray(mask)
    if mask.shape != (n,) or not np.all((mask == 0) | (mask == 1)):
        raise ValueError(f"expected a binary mask of length {n}")
    return mask.astype(bool)


def masked_macs(cost: CostModel, mask) -> int:
    mask = _check_binary(mask, len(cost.layer_costs))
    return cost.fixed_cost + int(cost.costs[mask].sum())


def schedule_macs(cost: CostModel, routing_table, expert_masks, steps) -> int:
    """Total per-item MACs over the visited ``steps``, each running its routed
    expert."""
    per_expert = [masked_macs(cost, m) for m in np.asarray(expert_masks)]
    return int(sum(per_expert[routing_table[t]] for t in steps))


def speedup(dense, pruned) -> float:
    if pruned <= 0:
        raise ValueError("pruned cost must be positive")
    return dense / pruned


wall_clock_speedup = speedup
