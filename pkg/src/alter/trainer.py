"""Alternating hypernetwork / denoiser optimisation and its ablation variants."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import objectives as obj
from .cost import profile_costs
from .data import BatchStream, ring_of_gaussians
from .diffusion import Denoiser, DenoiserConfig, clone_frozen, forward_noise, make_schedule
from .hypernet import Hypernet, MaskSet, manual_routing

log = logging.getLogger(__name__)

VARIANTS = ("alter", "static", "manual", "two_stage")
PHASES = ("hypernet", "unet")
METRIC_FIELDS = ("step", "phase", "L_denoise", "L_outKD", "L_featKD", "L_ratio",
                 "L_balance", "L_total", "S_current")


@dataclass
class TrainConfig:
    total_steps: int = 3000
    hypernet_end: int = 2000
    batch_size: int = 256
    lr_unet: float = 1e-4
    lr_hypernet: float = 1e-3
    warmup_steps: int = 250
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lr_decay: bool = False
    n_experts: int = 4
    seed: int = 0
    variant: str = "alter"
    # loss weights
    lambda_denoise: float = 1e-4
    lambda_out_kd: float = 1.0
    lambda_feat_kd: float = 1.0
    lambda_ratio: float = 5.0
    lambda_balance: float = 1.0
    target_sparsity: float = 0.65
    stability_eps: float = 1e-6
    weighted_perf_denoise: bool = True
    # Gumbel relaxations
    tau_g: float = 0.4
    b_g: float = 4.0
    tau_r: float = 0.4
    b_r: float = 0.0
    # architecture / data
    total_timesteps: int = 100
    schedule: str = "linear"
    data_dim: int = 2
    hidden: int = 128
    n_layers: int = 12
    emb_dim: int = 32
    n_classes: int = 0
    d_input: int = 64
    d_expert: int = 256
    d_router: int = 64
    n_train: int = 20000
    data_seed: int = 1234

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hypernet_end > self.total_steps:
            raise ValueError("hypernet_end must not exceed total_steps")
        if not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ValueError("warmup_steps must be smaller than total_steps")
        if self.n_experts < 1 or self.batch_size < 1:
            raise ValueError("n_experts and batch_size must be positive")
        if self.variant == "static":
            self.n_experts = 1
        self.weights  # validates the loss weights

    @property
    def weights(self) -> obj.LossWeights:
        return obj.LossWeights(
            denoise=self.lambda_denoise, out_kd=self.lambda_out_kd,
            feat_kd=self.lambda_feat_kd, ratio=self.lambda_ratio,
            balance=self.lambda_balance, target_sparsity=self.target_sparsity,
            stability_eps=self.stability_eps,
            weighted_perf_denoise=self.weighted_perf_denoise,
        )

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(data_dim=self.data_dim, hidden=self.hidden, n_layers=self.n_layers,
                              emb_dim=self.emb_dim, n_classes=self.n_classes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def pretrain_config(**overrides) -> TrainConfig:
    """Dense teacher training: one all-active mask, plain denoising loss."""
    base = dict(variant="static", hypernet_end=0, total_steps=4000, lr_unet=2e-3, lr_decay=True,
                lambda_denoise=1.0, lambda_out_kd=0.0, lambda_feat_kd=0.0,
                lambda_ratio=0.0, lambda_balance=0.0, target_sparsity=1.0)
    base.update(overrides)
    return TrainConfig(**base)


def full_scale_config(**overrides) -> TrainConfig:
    """Full-scale optimisation settings (32k steps, ten experts, the original
    learning rates) on the desk-scale network. ``hypernet_end`` is two epochs
    of 0.3M samples at batch 64."""
    base = dict(total_steps=32000, hypernet_end=2 * 300_000 // 64, batch_size=64, n_experts=10,
                lr_unet=1e-5, lr_hypernet=7e-5)
    base.update(overrides)
    return TrainConfig(**base)


def warmup_lr(lr: float, step: int, warmup_steps: int, decay_steps: int | None = None) -> float:
    """Linear warm-up over the first ``warmup_steps`` optimiser steps (1-based),
    constant afterwards unless ``decay_steps`` asks for a cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    if decay_steps:
        frac = min(1.0, (step - warmup_steps) / max(1, decay_steps - warmup_steps))
        return lr * 0.5 * (1 + math.cos(math.pi * frac))
    return lr


class WarmupAdamW:
    """AdamW with linear LR warm-up, global-norm clipping and a non-finite guard."""

    def __init__(self, params, lr, warmup_steps, weight_decay=0.01, grad_clip=1.0,
                 decay_steps=None):
        self.params = [p for p in params if p.requires_grad]
        self.base_lr = lr
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.grad_clip = grad_clip
        self.opt = torch.optim.AdamW(self.params, lr=lr, weight_decay=weight_decay, foreach=True)
        self.steps = 0
        self.skipped = 0

    def step(self) -> bool:
        norm = torch.nn.utils.clip_grad_norm_(
            self.params, self.grad_clip if self.grad_clip else float("inf"), foreach=True)
        if not torch.isfinite(norm):
            self.skipped += 1
            log.warning("non-finite gradient, skipping optimizer step %d", self.steps + 1)
            self.opt.zero_grad(set_to_none=True)
            return False
        self.steps += 1
        for group in self.opt.param_groups:
            group["lr"] = warmup_lr(self.base_lr, self.steps, self.warmup_steps, self.decay_steps)
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)
        return True

    def state_dict(self):
        return {"opt": self.opt.state_dict(), "steps": self.steps, "skipped": self.skipped}

    def load_state_dict(self, state):
        self.opt.load_state_dict(state["opt"])
        self.steps, self.skipped = int(state["steps"]), int(state["skipped"])


def optimizer_update(params, lr, step, warmup_steps, state=None, weight_decay=0.01):
    """Functional one-shot AdamW update at ``step`` (params carry ``.grad``)."""
    opt = WarmupAdamW(params, lr, warmup_steps, weight_decay=weight_decay, grad_clip=0)
    if state is not None:
        opt.load_state_dict(state)
    opt.steps = step - 1
    opt.step()
    return opt.state_dict()


@dataclass
class Batch:
    x0: torch.Tensor
    t: np.ndarray
    eps: torch.Tensor
    x_t: torch.Tensor
    cond: np.ndarray | None = None
    teacher_eps: torch.Tensor | None = None
    teacher_feats: list | None = None


def make_hypernet(config: TrainConfig) -> Hypernet:
    fixed = None
    if config.variant == "static":
        fixed = np.zeros(config.total_timesteps, dtype=np.int64)
    elif config.variant == "manual":
        fixed = manual_routing(config.total_timesteps, config.n_experts)
    return Hypernet(
        n_experts=config.n_experts, n_layers=config.n_layers,
        total_timesteps=config.total_timesteps, d_input=config.d_input,
        emb_dim=config.emb_dim, d_expert=config.d_expert, d_router=config.d_router,
        tau_g=config.tau_g, b_g=config.b_g, tau_r=config.tau_r, b_r=config.b_r,
        seed=config.seed + 1, fixed_routing=fixed,
    )


class Trainer:
    """Owns the student, frozen teacher, hypernetwork, optimisers and RNG.

    ``teacher=None`` starts the student from scratch (the pretraining path).
    Otherwise the student starts as a copy of the teacher.
    """

    def __init__(self, config: TrainConfig, teacher: Denoiser | None = None, data=None):
        self.config = config
        self.weights = config.weights
        self.schedule = make_schedule(config.total_timesteps, config.schedule)
        self.rng = np.random.default_rng(config.seed)
        if data is None:
            data = ring_of_gaussians(config.n_train, np.random.default_rng(config.data_seed))
        labels = None
        if isinstance(data, tuple):
            data, labels = data
        self.stream = BatchStream(data, config.batch_size, self.rng, labels)

        self.student = Denoiser(config.denoiser_config, seed=config.seed)
        if teacher is not None:
            self.student.load_state_dict(teacher.state_dict())
            self.teacher = clone_frozen(teacher)
        else:
            self.teacher = None
            self.student.set_normalization(data)
        self.hypernet = make_hypernet(config)
        self.costs = profile_costs(self.student).costs
        self.opt_unet = WarmupAdamW(
            self.student.parameters(), config.lr_unet, config.warmup_steps,
            config.weight_decay, config.grad_clip,
            decay_steps=config.total_steps if config.lr_decay else None)
        self.opt_hyper = None
        if any(p.requires_grad for p in self.hypernet.parameters()):
            self.opt_hyper = WarmupAdamW(self.hypernet.parameters(), config.lr_hypernet,
                                         config.warmup_steps, config.weight_decay,
                                         config.grad_clip)
        self.mask_set: MaskSet = self.hypernet.eval_masks()
        self.step = 0
        self.metrics: list[dict] = []

    # -- schedule of phases ------------------------------------------------
    @property
    def n_steps(self) -> int:
        c = self.config
        return c.hypernet_end + c.total_steps if c.variant == "two_stage" else c.total_steps

    def phases(self, step: int):
        c = self.config
        if c.variant == "two_stage":
            return ("hypernet",) if step <= c.hypernet_end else ("unet",)
        return ("hypernet", "unet") if step <= c.hypernet_end else ("unet",)

    # -- batches -------------------------------------------------------------
    def next_batch(self) -> Batch:
        x0, cond = self.stream.next()
        t = self.rng.integers(0, self.config.total_timesteps, size=len(x0))
        eps = self.rng.standard_normal(x0.shape)
        x0 = self.student.normalize(torch.from_numpy(x0))
        eps = torch.from_numpy(eps)
        batch = Batch(x0, t, eps, forward_noise(x0, t, eps, self.schedule), cond)
        if self.teacher is not None:
            with torch.no_grad():
                batch.teacher_eps, batch.teacher_feats = self.teacher(batch.x_t, t, cond=cond)
        return batch

    def _unet_terms(self, batch, eps_hat, feats):
        l_den = obj.denoise_loss(batch.eps, eps_hat)
        if self.teacher is None:
            zero = eps_hat.new_zeros(())
            return l_den, zero, zero
        return (l_den, obj.out_kd_loss(batch.teacher_eps, eps_hat),
                obj.feat_kd_loss(batch.teacher_feats, feats))

    # -- the two optimisation phases ------------------------------------------
    def hypernet_objective(self, batch: Batch, rng=None, hard: bool = True):
        """``L_H`` and its parts for trainable masks; ``rng`` supplies Gumbel noise
        (default: the trainer's stream)."""
        w = self.weights
        masks, rlogits = self.hypernet.train_masks(batch.t, self.rng if rng is None else rng,
                                                   hard=hard)
        eps_hat, feats = self.student(batch.x_t, batch.t, masks, cond=batch.cond)
        l_den, l_out, l_feat = self._unet_terms(batch, eps_hat, feats)
        lam_den = w.denoise if w.weighted_perf_denoise else 1.0
        perf = lam_den * l_den + w.out_kd * l_out + w.feat_kd * l_feat
        s_cur = obj.sparsity(masks, self.costs).mean()
        l_ratio = obj.ratio_loss(s_cur, w.target_sparsity, w.stability_eps)
        if self.hypernet.fixed_routing is None:
            l_bal = obj.balance_loss(rlogits)
        else:
            l_bal = torch.zeros((), dtype=torch.float64)
        total = obj.hypernet_loss(perf, l_ratio, l_bal, w)
        return total, (l_den, l_out, l_feat, l_ratio, l_bal, total, s_cur)

    def unet_objective(self, batch: Batch):
        masks = torch.from_numpy(self.mask_set.masks_for(batch.t))
        eps_hat, feats = self.student(batch.x_t, batch.t, masks, cond=batch.cond)
        l_den, l_out, l_feat = self._unet_terms(batch, eps_hat, feats)
        total = obj.unet_loss(l_den, l_out, l_feat, self.weights)
        return total, (l_den, l_out, l_feat, total, obj.sparsity(masks, self.costs).mean())

    def hypernet_step(self, batch: Batch) -> dict:
        if self.step > self.config.hypernet_end:
            raise RuntimeError("hypernet_step called after hypernet_end")
        self.student.requires_grad_(False)
        try:
            total, parts = self.hypernet_objective(batch)
            if self.opt_hyper is not None:
                total.backward()
                self.opt_hyper.step()
        finally:
            self.student.requires_grad_(True)
        self.mask_set = self.hypernet.eval_masks()
        return self._row("hypernet", *parts)

    def unet_step(self, batch: Batch) -> dict:
        total, (l_den, l_out, l_feat, _, s_cur) = self.unet_objective(batch)
        total.backward()
        self.hypernet.zero_grad(set_to_none=True)
        self.opt_unet.step()
        nan = float("nan")
        return self._row("unet", l_den, l_out, l_feat, nan, nan, total, s_cur)

    def _row(self, phase, *values):
        names = METRIC_FIELDS[2:]
        row = {"step": self.step, "phase": phase}
        row.update({k: float(v.detach() if torch.is_tensor(v) else v)
                    for k, v in zip(names, values)})
        return row

    def train_step(self):
        self.step += 1
        batch = self.next_batch()
        rows = []
        for phase in self.phases(self.step):
            rows.append(self.hypernet_step(batch) if phase == "hypernet" else self.unet_step(batch))
        self.metrics.extend(rows)
        return rows

    def run(self, until: int | None = None, callback=None):
        """Train up to step ``until`` (default: the end of the schedule)."""
        end = self.n_steps if until is None else min(until, self.n_steps)
        while self.step < end:
            rows = self.train_step()
            if callback is not None:
                callback(self, rows)
        return self

    # -- resumable state ----------------------------------------------------
    def state_dict(self) -> dict:
        metrics = np.array([[r[k] if k != "phase" else PHASES.index(r[k]) for k in METRIC_FIELDS]
                            for r in self.metrics], dtype=np.float64).reshape(-1, len(METRIC_FIELDS))
        return {
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "stream": self.stream.state(),
            "student": self.student.state_dict(),
            "teacher": None if self.teacher is None else self.teacher.state_dict(),
            "hypernet": self.hypernet.state_dict(),
            "opt_unet": self.opt_unet.state_dict(),
            "opt_hyper": None if self.opt_hyper is None else self.opt_hyper.state_dict(),
            "mask_set": vars(self.mask_set).copy(),
            "metrics": metrics,
        }

    def load_state_dict(self, state: dict):
        self.step = int(state["step"])
        self.rng.bit_generator.state = state["rng"]
        self.stream.load_state(state["stream"])
        self.student.load_state_dict(state["student"])
        self.hypernet.load_state_dict(state["hypernet"])
        self.opt_unet.load_state_dict(state["opt_unet"])
        if self.opt_hyper is not None:
            self.opt_hyper.load_state_dict(state["opt_hyper"])
        self.mask_set = MaskSet(**state["mask_set"])
        self.metrics = [
            {k: (PHASES[int(v)] if k == "phase" else int(v) if k == "step" else float(v))
             for k, v in zip(METRIC_FIELDS, row)}
            for row in np.asarray(state["metrics"])
        ]

    @classmethod
    def from_state(cls, config: TrainConfig, state: dict, data=None) -> "Trainer":
        teacher = None
        if state.get("teacher") is not None:
            teacher = Denoiser(config.denoiser_config)
            teacher.load_state_dict(state["teacher"])
        trainer = cls(config, teacher, data)
        trainer.load_state_dict(state)
        return trainer

    @property
    def done(self) -> bool:
        return self.step >= self.n_steps

    def mean_sparsity(self) -> float:
        """Cost-weighted sparsity averaged over every timestep of the schedule."""
        return float(obj.sparsity(self.mask_set.schedule_masks(), self.costs).mean())


def run_training(config: TrainConfig, teacher: Denoiser | None = None, data=None):
    """Train end-to-end; returns ``(student, mask_set, metrics)``."""
    trainer = Trainer(config, teacher, data).run()
    return trainer.student, trainer.mask_set, trainer.metrics


def pretrain(config: TrainConfig | None = None, data=None) -> Denoiser:
    config = config or pretrain_config()
    trainer = Trainer(config, None, data).run()
    return clone_frozen(trainer.student)
