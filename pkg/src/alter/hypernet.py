"""Expert generator, temporal router and straight-through Gumbel relaxations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, timestep_embedding

GUMBEL_CLAMP = 1e-10


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def st_gumbel_sigmoid(logits, tau: float, offset: float, gumbel=None, hard: bool = True):
    """Gumbel-sigmoid with a straight-through hard bit.

    Returns ``(soft, out)``. ``out`` equals the 0/1 decision (``soft >= 0.5``) in
    the forward pass and carries the gradient of ``soft``. With ``hard=False``
    ``out`` is just ``soft``. ``gumbel=None`` means zero noise (eval mode).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if not torch.all(torch.isfinite(logits)):
        raise ValueError("non-finite logit")
    if gumbel is not None:
        logits = logits + torch.as_tensor(gumbel, dtype=logits.dtype)
    soft = torch.sigmoid((logits + offset) / tau)
    if not hard:
        return soft, soft
    bit = (soft >= 0.5).to(soft.dtype)
    return soft, (bit - soft).detach() + soft


def st_gumbel_softmax(logits, tau: float, offset: float = 0.0, gumbel=None, hard: bool = True):
    """Gumbel-softmax over the last axis with a straight-through one-hot.

    Returns ``(soft, out)``; ties in the argmax resolve to the lowest index.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if not torch.all(torch.isfinite(logits)):
        raise ValueError("non-finite logits")
    if gumbel is not None:
        logits = logits + torch.as_tensor(gumbel, dtype=logits.dtype)
    soft = torch.softmax((logits + offset) / tau, dim=-1)
    if not hard:
        return soft, soft
    # torch.argmax returns the first maximal index
    onehot = F.one_hot(soft.argmax(dim=-1), soft.shape[-1]).to(soft.dtype)
    return soft, (onehot - soft).detach() + soft


def compose_mask(expert_masks, selection):
    """``m_t = s_t^T M``: per-timestep layer mask from expert rows.

    ``selection`` is ``(N_e,)`` or ``(batch, N_e)``; ``expert_masks`` is
    ``(N_e, N_L)``.
    """
    if torch.is_tensor(expert_masks) or torch.is_tensor(selection):
        M = torch.as_tensor(expert_masks, dtype=torch.float64)
        s = torch.as_tensor(selection, dtype=torch.float64)
    else:
        M, s = np.asarray(expert_masks, dtype=np.float64), np.asarray(selection, dtype=np.float64)
    if M.ndim != 2 or s.shape[-1] != M.shape[0]:
        raise ValueError(f"selection of size {s.shape[-1]} does not match {M.shape[0]} experts")
    return s @ M


def orthogonal_embeddings(n_experts, n_layers, dim, rng: np.random.Generator) -> np.ndarray:
    """Rows orthonormal within each consecutive block of ``dim`` rows (QR of a
    Gaussian matrix)."""
    n = n_experts * n_layers
    rows = []
    for start in range(0, n, dim):
        k = min(dim, n - start)
        q, r = np.linalg.qr(rng.standard_normal((dim, k)))
        q = q * np.sign(np.diag(r))
        rows.append(q.T)
    return np.concatenate(rows).reshape(n_experts, n_layers, dim)


class _MLPHead(nn.Module):
    # Linear -> LayerNorm -> ReLU -> Linear(no bias)
    def __init__(self, d_in, d_hidden, d_out, out_std):
        super().__init__()
        self.lin = nn.Linear(d_in, d_hidden)
        self.norm = nn.LayerNorm(d_hidden)
        self.head = nn.Linear(d_hidden, d_out, bias=False)
        if out_std is not None:
            nn.init.normal_(self.head.weight, std=out_std)

    def forward(self, x):
        return self.head(F.relu(self.norm(self.lin(x))))


@dataclass
class MaskSet:
    expert_logits: np.ndarray   # (N_e, N_L)
    expert_masks: np.ndarray    # (N_e, N_L), binary
    routing_logits: np.ndarray  # (T_total, N_e)
    routing_table: np.ndarray   # (T_total,)

    @property
    def n_experts(self) -> int:
        return self.expert_masks.shape[0]

    @property
    def n_layers(self) -> int:
        return self.expert_masks.shape[1]

    def masks_for(self, t) -> np.ndarray:
        """Binary layer masks for timestep(s) ``t``."""
        return self.expert_masks[self.routing_table[np.asarray(t)]]

    def schedule_masks(self) -> np.ndarray:
        return self.masks_for(np.arange(len(self.routing_table)))

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(np.ascontiguousarray(self.expert_masks, dtype=np.int8).tobytes())
        h.update(np.ascontiguousarray(self.routing_table, dtype=np.int64).tobytes())
        return h.hexdigest()

    @classmethod
    def fixed(cls, expert_masks, routing_table) -> "MaskSet":
        M = np.asarray(expert_masks, dtype=np.float64)
        rt = np.asarray(routing_table, dtype=np.int64)
        return cls(
            expert_logits=np.zeros_like(M),
            expert_masks=M,
            routing_logits=F.one_hot(torch.as_tensor(rt), M.shape[0]).double().numpy(),
            routing_table=rt,
        )


class Hypernet(nn.Module):
    """Expert generator over frozen orthogonal embeddings plus a temporal router
    over frozen sinusoidal timestep embeddings.

    Passing ``fixed_routing`` (one expert index per timestep) disables the
    router, as in the manual-interval and single-global-mask variants.
    """

    def __init__(
        self,
        n_experts: int = 4,
        n_layers: int = 12,
        total_timesteps: int = 100,
        d_input: int = 64,
        emb_dim: int = 32,
        d_expert: int = 256,
        d_router: int = 64,
        tau_g: float = 0.4,
        b_g: float = 4.0,
        tau_r: float = 0.4,
        b_r: float = 0.0,
        gen_out_std: float = 0.01,
        seed: int = 0,
        fixed_routing=None,
    ):
        super().__init__()
        if min(n_experts, n_layers, total_timesteps, d_input, emb_dim, d_expert, d_router) < 1:
            raise ValueError("all hypernet dimensions must be positive")
        self.n_experts, self.n_layers = n_experts, n_layers
        self.total_timesteps = total_timesteps
        self.tau_g, self.b_g, self.tau_r, self.b_r = tau_g, b_g, tau_r, b_r
        rng = np.random.default_rng(seed)
        Z = orthogonal_embeddings(n_experts, n_layers, d_input, rng)
        self.register_buffer("Z", torch.from_numpy(Z))
        self.register_buffer(
            "timestep_emb", timestep_embedding(torch.arange(total_timesteps), emb_dim)
        )
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.generator = _MLPHead(d_input, d_expert, 1, gen_out_std)
            self.router = _MLPHead(emb_dim, d_router, n_experts, None)
        self.double()
        if fixed_routing is not None:
            fixed_routing = np.asarray(fixed_routing, dtype=np.int64)
            if fixed_routing.shape != (total_timesteps,) or fixed_routing.max() >= n_experts:
                raise ValueError("fixed routing table must map every timestep to an expert")
            self.router.requires_grad_(False)
        self.fixed_routing = fixed_routing

    def expert_logits(self) -> torch.Tensor:
        return self.generator(self.Z).squeeze(-1)

    def routing_logits(self, t=None) -> torch.Tensor:
        emb = self.timestep_emb if t is None else self.timestep_emb[torch.as_tensor(t)]
        if self.fixed_routing is not None:
            table = torch.from_numpy(self.fixed_routing)
            idx = table if t is None else table[torch.as_tensor(t)]
            return F.one_hot(idx, self.n_experts).double()
        return self.router(emb)

    def expert_masks(self, gumbel=None, hard: bool = True):
        logits = self.expert_logits()
        return st_gumbel_sigmoid(logits, self.tau_g, self.b_g, gumbel, hard=hard)[1]

    def selection(self, t, gumbel=None, hard: bool = True):
        logits = self.routing_logits(t)
        if self.fixed_routing is not None:
            return logits
        return st_gumbel_softmax(logits, self.tau_r, self.b_r, gumbel, hard=hard)[1]

    def train_masks(self, t, rng: np.random.Generator | None, hard: bool = True):
        """Differentiable per-item masks ``m_t'`` for timesteps ``t``.

        Draws fresh Gumbel noise from ``rng`` (``None``: zero noise). Returns
        ``(masks, routing_logits)``.
        """
        t = np.asarray(t)
        g = None if rng is None else sample_gumbel((self.n_experts, self.n_layers), rng)
        G = None if rng is None else sample_gumbel((len(t), self.n_experts), rng)
        M = self.expert_masks(g, hard=hard)
        logits = self.routing_logits(t)
        if self.fixed_routing is not None:
            s = logits
        else:
            s = st_gumbel_softmax(logits, self.tau_r, self.b_r, G, hard=hard)[1]
        return compose_mask(M, s), logits

    @torch.no_grad()
    def eval_masks(self) -> MaskSet:
        logits = self.expert_logits()
        _, bits = st_gumbel_sigmoid(logits, self.tau_g, self.b_g, None)
        rlogits = self.routing_logits()
        if self.fixed_routing is not None:
            table = self.fixed_routing.copy()
        else:
            table = rlogits.argmax(dim=-1).numpy()
        return MaskSet(
            expert_logits=logits.numpy().copy(),
            expert_masks=bits.numpy().copy(),
            routing_logits=rlogits.numpy().copy(),
            routing_table=np.asarray(table, dtype=np.int64),
        )


def eval_masks(hypernet: Hypernet, schedule: NoiseSchedule | None = None) -> MaskSet:
    if schedule is not None and schedule.total_timesteps != hypernet.total_timesteps:
        raise ValueError("hypernet and schedule disagree on total timesteps")
    return hypernet.eval_masks()


def manual_routing(total_timesteps: int, n_experts: int) -> np.ndarray:
    """Contiguous, equal-length timestep intervals, one per expert."""
    return (np.arange(total_timesteps) * n_experts) // total_timesteps
