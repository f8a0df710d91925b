"""Evaluation: test metrics, long-horizon extrapolation, the difficulty sweep,
reference predictors and Welch's t statistic."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import datagen
from .network import ZnoModel
from .objective import rel_l2
from .seqcore import ConfigError, RngStream, TrajectoryBatch
from .trainer import ExperimentConfig, evaluate_batch, run_seeds, write_csv

log = logging.getLogger(__name__)

EXTRAP_SEED_OFFSET = 10_000

EXTRAP_COLUMNS = ["task", "model_tag", "protocol", "seed", "params", "eval_T", "test_rel_l2", "ratio"]
SWEEP_COLUMNS = ["task", "model_tag", "protocol", "bin", "rho_low", "rho_high", "n_seeds", "params",
                 "mean", "std", "std_sample", "zero_predictor", "wall_clock_s"]


def evaluate(model: ZnoModel, batch: TrajectoryBatch) -> float:
    """Relative L2 of the model's predictions on ``batch``."""
    return evaluate_batch(model, batch)


# ---------------------------------------------------------------------------
# reference predictors


def baseline_zero(batch: TrajectoryBatch) -> float:
    """The all-zero predictor; exactly 1.0 by construction."""
    return rel_l2(np.zeros_like(batch.targets), batch.targets)


def _lagged(u: np.ndarray, order: int) -> np.ndarray:
    """``[B, T, d_u * (order + 1)]`` design matrix of lags 0..order (zero-padded)."""
    B, T, d = u.shape
    X = np.zeros((B, T, d * (order + 1)))
    for j in range(order + 1):
        X[:, j:, j * d:(j + 1) * d] = u[:, : T - j]
    return X


@dataclass
class LinFir:
    order: int
    weights: np.ndarray
    ridge: bool

    def predict(self, u: np.ndarray) -> np.ndarray:
        return _lagged(u, self.order) @ self.weights


def fit_linfir(batch: TrajectoryBatch, order: int, ridge: float = 1e-8) -> LinFir:
    """Least-squares FIR from all input channels (lags 0..order) to the output,
    via the normal equations; falls back to ridge when they are singular."""
    if order < 1:
        raise ConfigError(f"FIR order must be >= 1, got {order}")
    X = _lagged(batch.inputs, order).reshape(-1, batch.d_u * (order + 1))
    Y = batch.targets.reshape(-1, batch.d_y)
    G = X.T @ X
    rhs = X.T @ Y
    used_ridge = False
    try:
        if np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned normal equations")
        W = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        used_ridge = True
        log.warning("linfir: singular normal equations, using ridge %.1e", ridge)
        W = np.linalg.solve(G + ridge * np.eye(G.shape[0]), rhs)
    return LinFir(order, W, used_ridge)


def baseline_linfir(batch: TrajectoryBatch, order: int, test: TrajectoryBatch | None = None) -> float:
    """Fit on ``batch`` and report the relative L2 on ``test`` (default: ``batch``)."""
    fir = fit_linfir(batch, order)
    test = batch if test is None else test
    return rel_l2(fir.predict(test.inputs), test.targets)


# ---------------------------------------------------------------------------
# statistics


def welch(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic (a - b) and its Welch-Satterthwaite dof."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        return (0.0 if diff == 0 else math.copysign(math.inf, diff)), math.nan
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(t), float(dof)


def welch_t(sample_a, sample_b) -> float:
    return welch(sample_a, sample_b)[0]


# ---------------------------------------------------------------------------
# extrapolation


@dataclass(frozen=True)
class ExtrapSpec:
    train_T: int
    eval_lengths: tuple

    def __post_init__(self):
        object.__setattr__(self, "eval_lengths", tuple(int(t) for t in self.eval_lengths))
        if any(t < self.train_T for t in self.eval_lengths):
            raise ConfigError("every evaluation length must be >= train_T")


def extrapolation_set(task: datagen.TaskSpec, T: int) -> TrajectoryBatch:
    """Fresh test set at length ``T`` from a held-out seed dedicated to that length."""
    spec = replace(task, T=T)
    stream = RngStream(task.seed + EXTRAP_SEED_OFFSET, f"extrap/{T}/datagen/{task.family.value}")
    return datagen.GENERATORS[task.family](spec, stream)


def extrapolate(model: ZnoModel, task: datagen.TaskSpec, spec: ExtrapSpec) -> list[dict]:
    """Evaluate at ``train_T`` and every longer length; the ratio is relative to ``train_T``.

    ``task`` fixes the family, parameter ranges, test-set size and data seed.
    """
    before = model.params.checksum()
    base = evaluate(model, extrapolation_set(task, spec.train_T))
    rows = [{"eval_T": spec.train_T, "test_rel_l2": base, "ratio": 1.0}]
    for T in spec.eval_lengths:
        m = evaluate(model, extrapolation_set(task, T))
        rows.append({"eval_T": T, "test_rel_l2": m, "ratio": m / base})
    if model.params.checksum() != before:
        raise RuntimeError("model parameters changed during extrapolation")
    return rows


# ---------------------------------------------------------------------------
# difficulty sweep


def bin_config(cfg: ExperimentConfig, b: int) -> ExperimentConfig:
    if cfg.data.task != datagen.Family.ResonantArma.value:
        raise ConfigError("the difficulty sweep runs on the arma task")
    return replace(cfg, data=replace(cfg.data, bin=b, path=None), tag=f"{cfg.tag}-bin{b}")


def difficulty_sweep(cfg: ExperimentConfig, bins=None, seeds=(0, 1, 2, 3, 4), out_dir=None,
                     jobs: int = 1) -> list[dict]:
    """Fresh ARMA data per pole-radius bin, one training run per seed, mean/std per bin."""
    all_bins = datagen.difficulty_bins()
    bins = range(len(all_bins)) if bins is None else bins
    rows = []
    for b in bins:
        bcfg = bin_config(cfg, b)
        runs = run_seeds(bcfg, seeds, out_dir=out_dir, jobs=jobs)
        _, _, test = bcfg.data.load()
        agg = runs.aggregate
        lo, hi = all_bins[b]
        rows.append({"task": cfg.task, "model_tag": cfg.tag, "protocol": cfg.protocol, "bin": b,
                     "rho_low": lo, "rho_high": hi, "n_seeds": agg.n, "params": runs.records[0].params,
                     "mean": agg.mean, "std": agg.std, "std_sample": agg.std_sample,
                     "zero_predictor": baseline_zero(test),
                     "wall_clock_s": float(np.mean([r.wall_clock_s for r in runs.records]))})
    if out_dir is not None:
        write_csv(Path(out_dir) / cfg.tag / "sweep.csv", rows, SWEEP_COLUMNS)
    return rows
