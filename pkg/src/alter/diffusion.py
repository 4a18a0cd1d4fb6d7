"""Forward noising process, timestep embeddings and the prunable denoiser."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ValueError("alpha_bar must be a 1-D array with at least 2 entries")
        if not np.all((ab > 0) & (ab <= 1)):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        if ab[0] < 0.99 or ab[-1] > 0.01:
            raise ValueError(
                f"schedule endpoints out of range: alpha_bar[0]={ab[0]:.4g}, "
                f"alpha_bar[-1]={ab[-1]:.4g}"
            )
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def total_timesteps(self) -> int:
        return len(self.alpha_bar)

    def __len__(self):
        return len(self.alpha_bar)


def make_schedule(total_timesteps: int, kind: str = "linear") -> NoiseSchedule:
    """Build a DDPM-style schedule with ``total_timesteps`` steps.

    ``linear`` rescales the usual 1e-4..0.02 beta range by ``1000 / T`` so short
    schedules still end near pure noise. ``cosine`` is the Nichol & Dhariwal
    schedule; it needs roughly ``T >= 20`` to satisfy the endpoint invariant.
    """
    T = int(total_timesteps)
    if T < 2:
        raise ValueError(f"total_timesteps must be >= 2, got {total_timesteps}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(min(1e-4 * scale, 0.01), min(0.02 * scale, 0.999), T)
        alpha_bar = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(alpha_bar=alpha_bar, kind=kind)


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """q-sample: ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``.

    ``t`` may be a scalar or one index per row of ``x0``. Works on numpy arrays
    and torch tensors.
    """
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.total_timesteps):
        raise IndexError(f"timestep out of range [0, {schedule.total_timesteps})")
    if tuple(np.shape(eps)) != tuple(np.shape(x0)):
        raise ValueError("eps must have the same shape as x0")
    ab = schedule.alpha_bar[t_arr]
    if torch.is_tensor(x0):
        ab = torch.as_tensor(ab, dtype=x0.dtype)
        if ab.ndim:
            ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    if np.ndim(ab):
        ab = ab.reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved sinusoidal embedding: ``(sin(t w_0), cos(t w_0), sin(t w_1), ...)``
    with ``w_i = max_period ** (-2i / dim)``.

    Returns shape ``(dim,)`` for scalar ``t`` and ``(n, dim)`` for a vector.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    freqs = max_period ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    args = t[..., None] * freqs
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.reshape(*t.shape, dim)


def layer_apply(x_in, m, block_fn, check: bool = True):
    """Soft layer skip: ``(1 - m) * x_in + m * block_fn(x_in)``.

    ``m`` is a scalar or a per-row column. A hard ``m == 0`` never calls
    ``block_fn``.
    """
    if check:
        m_arr = m.detach() if torch.is_tensor(m) else torch.as_tensor(m)
        if not torch.all(torch.isfinite(m_arr)) or torch.any((m_arr < 0) | (m_arr > 1)):
            raise ValueError("mask value must be finite and in [0, 1]")
    if not (torch.is_tensor(m) and (m.requires_grad or m.ndim > 0)):
        if float(m) == 0.0:
            return x_in
        if float(m) == 1.0:
            return block_fn(x_in)
    return (1 - m) * x_in + m * block_fn(x_in)


@dataclass
class DenoiserConfig:
    data_dim: int = 2
    hidden: int = 128
    n_layers: int = 12
    emb_dim: int = 32
    n_classes: int = 0

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ValueError("n_layers must be even and >= 2 (encoder/decoder halves)")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        if min(self.data_dim, self.hidden) < 1 or self.n_classes < 0:
            raise ValueError("dimensions must be positive")


class ResidualBlock(nn.Module):
    """``x + W2 silu(W1 [x, skip] + We e_t)``; decoder blocks take a skip input."""

    def __init__(self, hidden: int, emb_dim: int, decoder: bool = False):
        super().__init__()
        self.decoder = decoder
        self.lin1 = nn.Linear(hidden * (2 if decoder else 1), hidden)
        self.temb = nn.Linear(emb_dim, hidden, bias=False)
        self.lin2 = nn.Linear(hidden, hidden)

    def forward(self, x, emb, skip=None):
        h = torch.cat([x, skip], dim=-1) if self.decoder else x
        h = F.silu(self.lin1(h) + self.temb(emb))
        return x + self.lin2(h)


class Denoiser(nn.Module):
    """Residual MLP with a mirrored encoder/decoder skip topology.

    Blocks ``0..N/2-1`` form the encoder; decoder block ``i`` concatenates the
    recorded output of encoder block ``N-1-i``. Every block output is a feature
    tap, including skipped blocks (whose tap equals their input).
    """

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or DenoiserConfig()
        in_dim = config.data_dim + config.n_classes
        half = config.n_layers // 2
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.inp = nn.Linear(in_dim, config.hidden)
            self.blocks = nn.ModuleList(
                ResidualBlock(config.hidden, config.emb_dim, decoder=i >= half)
                for i in range(config.n_layers)
            )
            self.out = nn.Linear(config.hidden, config.data_dim)
        # affine map from data space to the model's working space
        self.register_buffer("data_shift", torch.zeros(config.data_dim))
        self.register_buffer("data_scale", torch.ones(()))
        self.double()
        self.call_counts = np.zeros(config.n_layers, dtype=np.int64)

    def set_normalization(self, data):
        data = torch.as_tensor(np.asarray(data), dtype=self.data_shift.dtype)
        self.data_shift.copy_(data.mean(0))
        self.data_scale.copy_((data - data.mean(0)).std())

    def normalize(self, x):
        return (x - self.data_shift) / self.data_scale

    def denormalize(self, x):
        return x * self.data_scale + self.data_shift

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def skip_source(self, i: int) -> int | None:
        half = self.n_layers // 2
        return None if i < half else self.n_layers - 1 - i

    def reset_counters(self):
        self.call_counts[:] = 0

    def _embed(self, x_t, t, cond):
        if self.config.n_classes:
            if cond is None:
                raise ValueError("conditional model requires class labels")
            onehot = F.one_hot(torch.as_tensor(cond), self.config.n_classes).to(x_t.dtype)
            x_t = torch.cat([x_t, onehot], dim=-1)
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        emb = timestep_embedding(t, self.config.emb_dim).to(x_t.dtype)
        return self.inp(x_t), emb

    def forward(self, x_t, t, mask=None, cond=None):
        """Soft-skip simulated pruning. ``mask`` is ``(N_L,)`` or ``(batch, N_L)``
        with values in [0, 1]; ``None`` means all active.

        Returns ``(eps_hat, features)``.
        """
        h, emb = self._embed(x_t, t, cond)
        rows = None
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=h.dtype)
            if mask.shape[-1] != self.n_layers:
                raise ValueError(f"mask length {mask.shape[-1]} != n_layers {self.n_layers}")
            if mask.ndim == 2:
                if not mask.requires_grad and torch.all((mask == 0) | (mask == 1)):
                    # binary per-row masks: run each block only on its active rows
                    rows = [torch.nonzero(mask[:, i]).squeeze(1) for i in range(self.n_layers)]
                mask = mask[:, :, None]
        feats = []
        for i, block in enumerate(self.blocks):
            src = self.skip_source(i)
            skip = feats[src] if src is not None else None

            def fn(x, block=block, skip=skip):
                return block(x, emb, skip)

            if mask is None or (rows is not None and len(rows[i]) == len(h)):
                h = fn(h)
            elif rows is not None:
                r = rows[i]
                if len(r):
                    sub = block(h[r], emb[r], None if skip is None else skip[r])
                    h = h.index_copy(0, r, sub)
            else:
                h = layer_apply(h, mask[i] if mask.ndim == 1 else mask[:, i], fn, check=False)
            feats.append(h)
        return self.out(h), feats

    def forward_hard(self, x_t, t, mask, cond=None):
        """Physically skip blocks whose (shared, binary) mask bit is 0.

        Increments ``call_counts`` for each executed block.
        """
        mask = np.asarray(mask)
        if mask.shape != (self.n_layers,):
            raise ValueError(f"hard mask must have shape ({self.n_layers},)")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("hard mask must be binary")
        h, emb = self._embed(x_t, t, cond)
        feats = []
        for i, block in enumerate(self.blocks):
            if mask[i]:
                src = self.skip_source(i)
                h = block(h, emb, feats[src] if src is not None else None)
                self.call_counts[i] += 1
            feats.append(h)
        return self.out(h)


class PrunedDenoiser(nn.Module):
    """A denoiser rebuilt with masked blocks physically deleted.

    Decoder blocks keep reading the feature at their original skip position,
    which for a deleted encoder block is that block's input.
    """

    def __init__(self, model: Denoiser, mask):
        super().__init__()
        mask = np.asarray(mask).astype(bool)
        self.config = model.config
        self.inp, self.out = model.inp, model.out
        self.kept = [int(i) for i in np.flatnonzero(mask)]
        self.blocks = nn.ModuleList(model.blocks[i] for i in self.kept)
        self._skip = {i: model.skip_source(i) for i in self.kept}
        self._embed = model._embed

    def forward(self, x_t, t, cond=None):
        h, emb = self._embed(x_t, t, cond)
        # position -> feature after that position; deleted blocks pass through
        feats = {}
        last = -1
        for i, block in zip(self.kept, self.blocks):
            for j in range(last + 1, i):
                feats[j] = h
            src = self._skip[i]
            h = block(h, emb, feats[src] if src is not None else None)
            feats[i] = h
            last = i
        return self.out(h)


def hard_prune_copy(model: Denoiser, mask) -> PrunedDenoiser:
    return PrunedDenoiser(model, mask)


def clone_frozen(model: Denoiser) -> Denoiser:
    twin = Denoiser(model.config)
    twin.load_state_dict(model.state_dict())
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin.eval()
