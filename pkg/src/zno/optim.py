"""Adam with weight decay, StepLR schedule and global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seqcore import ConfigError, ParamStore


class DivergenceError(FloatingPointError):
    """Non-finite gradient or loss; the run cannot continue."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_size: int = 100
    gamma: float = 0.5
    clip_norm: float | None = None
    epochs: int = 600
    batch_size: int = 32
    decoupled_wd: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.step_size < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("step_size and batch_size must be >= 1, epochs >= 0")


def scheduled_lr(cfg: OptimConfig, epoch: int) -> float:
    """StepLR: ``lr * gamma ** (epoch // step_size)``."""
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale gradients in place to global norm ``max_norm`` if above it; returns the pre-clip norm."""
    norm = float(np.linalg.norm(params.grads))
    if norm > max_norm:
        params.grads *= max_norm / norm
    return norm


class Adam:
    def __init__(self, params: ParamStore, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.m = np.zeros_like(params.values)
        self.v = np.zeros_like(params.values)
        self.t = 0

    def step(self, epoch: int) -> float:
        """One update using the current gradients; returns the learning rate used."""
        cfg = self.cfg
        g = self.params.grads
        if not np.all(np.isfinite(g)):
            bad = np.flatnonzero(~np.isfinite(g))[:5].tolist()
            raise DivergenceError(f"non-finite gradient at indices {bad} (step {self.t + 1})")
        lr = scheduled_lr(cfg, epoch)
        x = self.params.values
        if cfg.weight_decay and not cfg.decoupled_wd:
            g = g + cfg.weight_decay * x
        b1, b2 = cfg.betas
        self.t += 1
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * g * g
        m_hat = self.m / (1.0 - b1 ** self.t)
        v_hat = self.v / (1.0 - b2 ** self.t)
        if cfg.weight_decay and cfg.decoupled_wd:
            x -= lr * cfg.weight_decay * x
        x -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return lr


def adam_step(params: ParamStore, state: Adam, cfg: OptimConfig, epoch: int) -> float:
    """Functional spelling of ``Adam.step``."""
    if state.params is not params or state.cfg is not cfg:
        raise ConfigError("optimizer state belongs to different parameters or config")
    return state.step(epoch)
