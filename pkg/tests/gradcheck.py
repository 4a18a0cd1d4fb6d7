"""Central finite-difference checks of the training objectives."""
import numpy as np
import torch

from conftest import tiny_config
from alter.diffusion import Denoiser, DenoiserConfig
from alter.hypernet import MaskSet
from alter.trainer import Trainer

H = 1e-6


def fd_relative_error(loss_fn, params, h=H):
    """``||g - g_fd|| / max(||g||, ||g_fd||)`` over all entries of ``params``."""
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                          for g, p in zip(grads, params)])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-300)
    return (analytic - numeric).norm().item() / scale


def _instance(seed, **cfg):
    config = tiny_config(hidden=6, n_layers=4, emb_dim=4, batch_size=16, seed=seed, **cfg)
    teacher = Denoiser(DenoiserConfig(hidden=6, n_layers=4, emb_dim=4), seed=100 + seed)
    tr = Trainer(config, teacher)
    g = np.random.default_rng(seed)
    with torch.no_grad():
        for p in tr.student.parameters():
            p.add_(0.2 * torch.from_numpy(g.standard_normal(tuple(p.shape))))
        for p in tr.hypernet.parameters():
            p.add_(0.5 * torch.from_numpy(g.standard_normal(tuple(p.shape))))
    return tr, g


def unet_instance(seed, fractional):
    """``(loss_fn, params)`` for L_U w.r.t. the denoiser parameters."""
    tr, g = _instance(seed)
    n_e = tr.config.n_experts
    M = g.uniform(0, 1, size=(n_e, 4)) if fractional else g.integers(0, 2, size=(n_e, 4))
    tr.mask_set = MaskSet.fixed(M, g.integers(0, n_e, size=tr.config.total_timesteps))
    batch = tr.next_batch()
    return (lambda: tr.unet_objective(batch)[0]), list(tr.student.parameters())


def hypernet_instance(seed):
    """``(loss_fn, params)`` for L_H w.r.t. the hypernetwork parameters on the soft
    relaxation with frozen Gumbel noise."""
    tr, g = _instance(seed, target_sparsity=float(g_target(seed)))
    tr.student.requires_grad_(False)
    batch = tr.next_batch()
    noise_seed = int(g.integers(2**31))

    def loss():
        return tr.hypernet_objective(batch, rng=np.random.default_rng(noise_seed), hard=False)[0]

    return loss, [p for p in tr.hypernet.parameters() if p.requires_grad]


def g_target(seed):
    return np.random.default_rng(10_000 + seed).uniform(0.3, 0.9)


def all_instances(n=20):
    """At least ``n`` L_U and ``n`` L_H instances, binary and fractional masks."""
    out = []
    for k in range(n):
        out.append((f"L_U seed={k} fractional={k % 2 == 1}", *unet_instance(k, k % 2 == 1)))
        out.append((f"L_H seed={k}", *hypernet_instance(k)))
    return out
