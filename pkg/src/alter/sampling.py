"""Routed reverse diffusion, MMD quality metric and the compute benchmark."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .cost import CostModel, profile_costs, schedule_macs, speedup
from .diffusion import Denoiser, NoiseSchedule
from .hypernet import MaskSet


def inference_timesteps(total_timesteps: int, n_steps: int) -> np.ndarray:
    """Evenly spaced timesteps in decreasing order, always including ``T-1``."""
    if not 1 <= n_steps <= total_timesteps:
        raise ValueError(f"n_steps must be in [1, {total_timesteps}]")
    ts = np.round(np.linspace(total_timesteps - 1, 0, n_steps)).astype(np.int64)
    return np.unique(ts)[::-1]


def _check_coverage(mask_set, total):
    if mask_set is not None and len(mask_set.routing_table) < total:
        raise ValueError("mask set does not route every timestep")


@torch.no_grad()
def sample(model: Denoiser, mask_set: MaskSet | None, schedule: NoiseSchedule, n_steps: int,
           n_samples: int, rng: np.random.Generator, hard_prune: bool = False, cond=None,
           x_T=None):
    """Deterministic DDIM sampling with the routed expert mask at each step.

    ``mask_set=None`` runs the dense model. With ``hard_prune`` skipped blocks
    are never called; otherwise masks are applied through the soft-skip path.
    """
    _check_coverage(mask_set, schedule.total_timesteps)
    ts = inference_timesteps(schedule.total_timesteps, n_steps)
    ab = schedule.alpha_bar
    if x_T is None:
        x_T = rng.standard_normal((n_samples, model.config.data_dim))
    x = torch.as_tensor(np.asarray(x_T), dtype=next(model.parameters()).dtype)
    ones = np.ones(model.n_layers)
    for i, t in enumerate(ts):
        mask = ones if mask_set is None else mask_set.masks_for(t)
        if hard_prune:
            eps = model.forward_hard(x, int(t), mask, cond=cond)
        else:
            eps = model(x, int(t), torch.as_tensor(mask), cond=cond)[0]
        a_t = ab[t]
        a_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = (x - np.sqrt(1 - a_t) * eps) / np.sqrt(a_t)
        x = np.sqrt(a_prev) * x0 + np.sqrt(1 - a_prev) * eps
    return model.denormalize(x).double().numpy()


def median_bandwidth(a, b) -> float:
    pooled = np.concatenate([a, b])
    d = cdist(pooled, pooled)
    return float(np.median(d[np.triu_indices(len(pooled), k=1)]))


def mmd_squared(a, b, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with an RBF kernel ``exp(-d^2 / (2 h^2))``."""
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample set needs at least 2 points")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2 * h * h)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    m, n = len(a), len(b)
    return float(
        (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        - 2 * kab.mean()
    )


@dataclass
class BenchReport:
    steps: int
    dense_macs: int
    pruned_macs: int
    mac_speedup: float
    dense_ms: float
    pruned_ms: float
    wall_speedup: float
    block_calls: tuple = ()
    expected_calls: tuple = ()

    CSV_FIELDS = ("steps", "dense_macs", "pruned_macs", "mac_speedup", "dense_ms",
                  "pruned_ms", "wall_speedup")

    def row(self):
        d = asdict(self)
        return {k: d[k] for k in self.CSV_FIELDS}


def _median_ms(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000 * float(np.median(times))


def bench(model: Denoiser, mask_set: MaskSet, schedule: NoiseSchedule, n_steps: int,
          repetitions: int = 20, n_samples: int = 256, warmup: int = 3, seed: int = 0,
          cost: CostModel | None = None, dtype=torch.float32) -> BenchReport:
    """Time dense vs hard-pruned sampling and account MACs per generated item.

    Timings are medians over ``repetitions`` full sampling runs of
    ``n_samples`` items. Raises if block-call counters disagree with the masks.
    """
    cost = cost or profile_costs(model)
    ts = inference_timesteps(schedule.total_timesteps, n_steps)
    dense_macs = len(ts) * cost.dense_macs
    pruned_macs = schedule_macs(cost, mask_set.routing_table, mask_set.expert_masks, ts)

    run_model = model
    if dtype != torch.float64:
        run_model = Denoiser(model.config)
        run_model.load_state_dict(model.state_dict())
        run_model.to(dtype)
    x_T = np.random.default_rng(seed).standard_normal((n_samples, model.config.data_dim))
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        dense_ms = _median_ms(
            lambda: sample(run_model, None, schedule, n_steps, n_samples, None,
                           hard_prune=True, x_T=x_T),
            repetitions, warmup)
        pruned_ms = _median_ms(
            lambda: sample(run_model, mask_set, schedule, n_steps, n_samples, None,
                           hard_prune=True, x_T=x_T),
            repetitions, warmup)
        run_model.reset_counters()
        sample(run_model, mask_set, schedule, n_steps, n_samples, None, hard_prune=True, x_T=x_T)
    finally:
        torch.set_num_threads(threads)
    calls = run_model.call_counts.copy()
    expected = mask_set.masks_for(ts).sum(axis=0).astype(np.int64)
    if not np.array_equal(calls, expected):
        raise RuntimeError(f"block calls {calls.tolist()} disagree with masks {expected.tolist()}")
    return BenchReport(
        steps=len(ts),
        dense_macs=int(dense_macs),
        pruned_macs=int(pruned_macs),
        mac_speedup=speedup(dense_macs, pruned_macs),
        dense_ms=dense_ms,
        pruned_ms=pruned_ms,
        wall_speedup=speedup(dense_ms, pruned_ms),
        block_calls=tuple(int(c) for c in calls),
        expected_calls=tuple(int(c) for c in expected),
    )
