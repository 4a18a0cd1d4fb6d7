"""scikit-learn style wrapper: ``fit`` trains a routed pruned denoiser,
``sample`` draws from it and ``score`` compares samples to data by MMD."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .diffusion import Denoiser
from .sampling import mmd_squared, sample
from .trainer import Trainer, TrainConfig, pretrain, pretrain_config


class AlterDiffusion(BaseEstimator):
    """Timestep-routed layer-pruned diffusion model for tabular points.

    Parameters mirror :class:`TrainConfig`. When ``teacher`` is ``None`` a
    dense teacher is first trained on ``X`` for ``teacher_steps`` steps.

    Attributes
    ----------
    teacher_ : Denoiser
    student_ : Denoiser
    mask_set_ : MaskSet
    metrics_ : list of dict
    n_features_in_ : int
    """

    def __init__(self, variant="alter", n_experts=4, target_sparsity=0.65, total_steps=3000,
                 hypernet_end=2000, batch_size=256, lr_unet=1e-4, lr_hypernet=1e-3,
                 lambda_ratio=5.0, lambda_balance=1.0, hidden=128, n_layers=12,
                 total_timesteps=100, warmup_steps=250, teacher=None, teacher_steps=4000,
                 n_steps=50, random_state=0):
        self.variant = variant
        self.n_experts = n_experts
        self.target_sparsity = target_sparsity
        self.total_steps = total_steps
        self.hypernet_end = hypernet_end
        self.batch_size = batch_size
        self.lr_unet = lr_unet
        self.lr_hypernet = lr_hypernet
        self.lambda_ratio = lambda_ratio
        self.lambda_balance = lambda_balance
        self.hidden = hidden
        self.n_layers = n_layers
        self.total_timesteps = total_timesteps
        self.warmup_steps = warmup_steps
        self.teacher = teacher
        self.teacher_steps = teacher_steps
        self.n_steps = n_steps
        self.random_state = random_state

    def _config(self, n_features, seed, **extra):
        return TrainConfig(
            variant=self.variant, n_experts=self.n_experts,
            target_sparsity=self.target_sparsity, total_steps=self.total_steps,
            hypernet_end=self.hypernet_end, batch_size=self.batch_size,
            lr_unet=self.lr_unet, lr_hypernet=self.lr_hypernet,
            lambda_ratio=self.lambda_ratio, lambda_balance=self.lambda_balance,
            hidden=self.hidden, n_layers=self.n_layers,
            total_timesteps=self.total_timesteps, warmup_steps=self.warmup_steps,
            data_dim=n_features, seed=seed, **extra)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if len(X) < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} samples, got {len(X)}")
        self.n_features_in_ = X.shape[1]
        seed = int(check_random_state(self.random_state).randint(2**31 - 1)) \
            if not isinstance(self.random_state, (int, np.integer)) else int(self.random_state)
        config = self._config(X.shape[1], seed)
        if self.teacher is None:
            pcfg = pretrain_config(
                total_steps=self.teacher_steps, batch_size=self.batch_size, hidden=self.hidden,
                n_layers=self.n_layers, total_timesteps=self.total_timesteps,
                warmup_steps=min(self.warmup_steps, self.teacher_steps // 2),
                data_dim=X.shape[1], seed=seed)
            self.teacher_ = pretrain(pcfg, X)
        else:
            if not isinstance(self.teacher, Denoiser):
                raise TypeError("teacher must be a Denoiser")
            if self.teacher.config != config.denoiser_config:
                raise ValueError("teacher architecture does not match the estimator parameters")
            self.teacher_ = self.teacher
        trainer = Trainer(config, self.teacher_, X).run()
        self.student_ = trainer.student
        self.mask_set_ = trainer.mask_set
        self.metrics_ = trainer.metrics
        self.schedule_ = trainer.schedule
        self.mean_sparsity_ = trainer.mean_sparsity()
        return self

    def sample(self, n_samples=1000, n_steps=None, random_state=None, hard_prune=True):
        check_is_fitted(self, "student_")
        rng = np.random.default_rng(random_state)
        return sample(self.student_, self.mask_set_, self.schedule_, n_steps or self.n_steps,
                      n_samples, rng, hard_prune=hard_prune)

    def score(self, X, y=None):
        """Negative MMD^2 between ``len(X)`` samples and ``X`` (higher is better)."""
        check_is_fitted(self, "student_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return -mmd_squared(self.sample(len(X), random_state=0), X)
