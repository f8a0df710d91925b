"""Training objective: relative Frobenius loss, suffix loss and the pole-safety
hinge, combined with per-term toggles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seqcore import ConfigError, TrajectoryBatch
from .zlayer import RHO_MAX, pole_radii


class ZeroTargetError(ValueError):
    """A target trajectory has zero norm, so its relative error is undefined."""


@dataclass(frozen=True)
class LossConfig:
    lambda_pole: float = 1e-3
    lambda_suf: float = 1e-2
    rho_safe: float = 0.95
    suffix_enabled: bool = True
    pole_reg_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.rho_safe < RHO_MAX:
            raise ConfigError(f"rho_safe must lie in (0, {RHO_MAX}), got {self.rho_safe}")

    @classmethod
    def plain(cls) -> "LossConfig":
        """Plain relative-L2 training (both auxiliary terms off)."""
        return cls(suffix_enabled=False, pole_reg_enabled=False)


def rel_l2_with_grad(pred, target):
    """Batch-mean of per-sample ``||pred - target||_F / ||target||_F`` and its gradient."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {target.shape}")
    axes = tuple(range(1, target.ndim))
    den = np.sqrt(np.sum(target * target, axis=axes))
    bad = np.flatnonzero(den == 0)
    if bad.size:
        raise ZeroTargetError(f"zero-norm target in samples {bad.tolist()}")
    err = pred - target
    num = np.sqrt(np.sum(err * err, axis=axes))
    N = target.shape[0]
    value = float(np.mean(num / den))
    # norm is not differentiable at 0; use the zero subgradient there
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(num > 0, 1.0 / (N * num * den), 0.0)
    grad = err * scale.reshape((-1,) + (1,) * len(axes))
    return value, grad


def rel_l2(pred, target) -> float:
    return rel_l2_with_grad(pred, target)[0]


def suffix_start(T: int) -> int:
    if T < 4:
        raise ConfigError(f"suffix loss needs T >= 4, got {T}")
    return T // 4


def suffix_loss_with_grad(pred, target):
    pred = np.asarray(pred)
    start = suffix_start(pred.shape[1])
    value, g = rel_l2_with_grad(pred[:, start:], np.asarray(target)[:, start:])
    grad = np.zeros_like(pred)
    grad[:, start:] = g
    return value, grad


def suffix_loss(pred, target, T: int | None = None) -> float:
    """``rel_l2`` restricted to time steps ``[T // 4, T)``."""
    T = np.asarray(pred).shape[1] if T is None else T
    if T != np.asarray(pred).shape[1]:
        raise ConfigError(f"T={T} does not match prediction length {np.asarray(pred).shape[1]}")
    return suffix_loss_with_grad(pred, target)[0]


def pole_safety(model, rho_safe: float = 0.95, accumulate_scale: float | None = None) -> float:
    """Mean over all ``L r K`` pole slots of ``max(|p| - rho_safe, 0)^2``.

    A conjugate pair fills two slots. When ``accumulate_scale`` is given, that
    multiple of the gradient is added to the model's parameter gradients.
    """
    cfg = model.config
    n_slots = cfg.L * cfg.r * cfg.K
    total = 0.0
    for layer, grads in zip(model.layers, model.layer_grads):
        rad, drad, rr, drr = pole_radii(layer.pole_bank)
        hinge = np.maximum(rad - rho_safe, 0.0)
        total += 2.0 * np.sum(hinge * hinge)
        if accumulate_scale is not None:
            grads.pole_bank.rho_tilde += accumulate_scale * 4.0 * hinge * drad / n_slots
        if rr is not None:
            hr = np.maximum(rr - rho_safe, 0.0)
            total += np.sum(hr * hr)
            if accumulate_scale is not None:
                grads.pole_bank.real_rho_tilde += accumulate_scale * 2.0 * hr * drr / n_slots
    return float(total / n_slots)


def total_objective(model, batch: TrajectoryBatch, cfg: LossConfig, backward: bool = True):
    """Combined loss from one forward pass; fills ``model.params.grads`` (zeroed first).

    Returns ``(loss, terms)`` where ``terms`` holds the unweighted components.
    """
    if batch.B == 0:
        raise ConfigError("empty batch")
    pred = model.forward(batch.inputs, keep=backward)
    data, g = rel_l2_with_grad(pred, batch.targets)
    loss = data
    terms = {"rel_l2": data}
    if cfg.suffix_enabled:
        suf, gs = suffix_loss_with_grad(pred, batch.targets)
        loss += cfg.lambda_suf * suf
        g = g + cfg.lambda_suf * gs
        terms["suffix"] = suf
    if backward:
        model.zero_grad()
        model.backward(g)
    if cfg.pole_reg_enabled:
        pole = pole_safety(model, cfg.rho_safe, cfg.lambda_pole if backward else None)
        loss += cfg.lambda_pole * pole
        terms["pole"] = pole
    return float(loss), terms
