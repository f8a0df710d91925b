"""Training loop, best-validation checkpointing, multi-seed orchestration and run records."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import datagen
from .network import ZnoConfig, ZnoModel, export_poles, save_checkpoint
from .objective import LossConfig, rel_l2, total_objective
from .optim import Adam, DivergenceError, OptimConfig, clip_grad_norm
from .seqcore import ConfigError, RngStream, TrajectoryBatch, load_dataset, split_dataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DIVERGENCE_THRESHOLD = 10.0
DIVERGED_VALUE = 1.0

SUMMARY_COLUMNS = ["task", "model_tag", "protocol", "seed", "params", "test_rel_l2", "wall_clock_s"]
AGGREGATE_COLUMNS = ["task", "model_tag", "protocol", "n_seeds", "params", "mean", "std",
                     "std_sample", "n_divergent", "wall_clock_s"]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DataConfig:
    """Either a synthetic task (``task``/``bin``/sizes/``seed``) or a dataset ``path``."""

    task: str = "arma"
    bin: int | None = None
    n_train: int = 128
    n_val: int = 16
    n_test: int = 16
    T: int = 512
    seed: int = 0
    path: str | None = None

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def task_spec(self, T: int | None = None, n_traj: int | None = None, seed: int | None = None):
        fam = datagen.Family(self.task)
        n = self.n_total if n_traj is None else n_traj
        T = self.T if T is None else T
        seed = self.seed if seed is None else seed
        if fam is datagen.Family.ResonantArma:
            return datagen.arma_spec(n, T, seed=seed, bin=self.bin)
        if self.bin is not None:
            raise ConfigError("difficulty bins apply to the arma task only")
        return datagen.TaskSpec(fam, n_traj=n, T=T, seed=seed)

    def load(self):
        if self.path:
            full, _ = load_dataset(self.path)
        else:
            full = datagen.generate(self.task_spec())
        return split_dataset(full, self.n_train, self.n_val, self.n_test)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ZnoConfig
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tag: str = "zno"
    protocol: str = "desk"

    @property
    def task(self) -> str:
        return self.data.task

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tag": self.tag,
            "protocol": self.protocol,
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "optim": {**asdict(self.optim), "betas": list(self.optim.betas)},
            "data": asdict(self.data),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, {"schema_version", "tag", "protocol", "model", "loss", "optim", "data"}, "")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported value {version}")
        data = _build(DataConfig, d.get("data", {}), "data")
        model_d = dict(d.get("model", {}))
        d_u = datagen.CHANNELS[datagen.Family(data.task)]
        if data.path is None:
            model_d.setdefault("d_u", d_u)
            model_d.setdefault("d_y", 1)
        model = _build(ZnoConfig, model_d, "model")
        return cls(model=model,
                   loss=_build(LossConfig, d.get("loss", {}), "loss"),
                   optim=_build(OptimConfig, d.get("optim", {}), "optim"),
                   data=data,
                   tag=d.get("tag", "zno"),
                   protocol=d.get("protocol", "desk"))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def with_overrides(self, **model_kw) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, **model_kw))


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown field(s): {', '.join(where + k for k in unknown)}")


def _build(cls, d, path):
    _check_keys(d, {f.name for f in fields(cls)}, path)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# single run


@dataclass
class RunRecord:
    config: dict
    seed: int
    params: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_val_epoch: int = 0
    best_val: float = math.nan
    test_rel_l2: float = math.nan
    wall_clock_s: float = 0.0
    divergent: bool = False
    divergence_reason: str = ""
    max_pole_modulus: list = field(default_factory=list)
    pole_export_path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def evaluate_batch(model: ZnoModel, batch: TrajectoryBatch, chunk: int = 64) -> float:
    """Plain relative L2 over ``batch``, evaluated in sample chunks."""
    num = 0.0
    for i in range(0, batch.B, chunk):
        part = batch.take(slice(i, i + chunk))
        num += rel_l2(model.predict(part.inputs), part.targets) * part.B
    return num / batch.B


def train(model: ZnoModel, splits, loss_cfg: LossConfig, optim_cfg: OptimConfig, seed: int,
          callback: Callable | None = None, reinit: bool = True) -> RunRecord:
    """Train with per-epoch shuffling and validation; restore the best-validation
    parameters and report the test metric from them.

    ``callback(epoch, model, record)`` runs after every epoch's validation.
    """
    train_set, val_set, test_set = splits
    if reinit:
        model.initialize(seed)
    rec = RunRecord(config={}, seed=seed, params=model.params.size)
    opt = Adam(model.params, optim_cfg)
    shuffle = RngStream(seed, "shuffle")
    bs = optim_cfg.batch_size
    best_values = model.params.values.copy()
    best_val = math.inf
    start = time.perf_counter()
    try:
        for epoch in range(optim_cfg.epochs):
            order = shuffle.child(epoch).generator().permutation(train_set.B)
            losses = []
            for i in range(0, train_set.B, bs):
                batch = train_set.take(order[i:i + bs])
                loss, _ = total_objective(model, batch, loss_cfg)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
                if optim_cfg.clip_norm is not None:
                    clip_grad_norm(model.params, optim_cfg.clip_norm)
                opt.step(epoch)
                losses.append(loss)
            val = evaluate_batch(model, val_set)
            rec.train_loss.append(float(np.mean(losses)))
            rec.val_loss.append(val)
            rec.max_pole_modulus.append(model.max_pole_modulus())
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch + 1}")
            if val < best_val:
                best_val = val
                best_values = model.params.values.copy()
                rec.best_val_epoch = epoch + 1
            if callback is not None:
                callback(epoch + 1, model, rec)
    except DivergenceError as e:
        rec.divergent = True
        rec.divergence_reason = str(e)
        log.warning("seed %d diverged: %s", seed, e)
    rec.wall_clock_s = time.perf_counter() - start

    model.params.values[:] = best_values
    if rec.divergent:
        rec.test_rel_l2 = DIVERGED_VALUE
        return rec
    rec.best_val = evaluate_batch(model, val_set) if optim_cfg.epochs == 0 else best_val
    rec.test_rel_l2 = evaluate_batch(model, test_set)
    return rec


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class Aggregate:
    mean: float
    std: float
    std_sample: float
    n: int
    n_divergent: int = 0
    single_seed: bool = False


def clamp_divergent(value: float) -> float:
    if not math.isfinite(value) or value > DIVERGENCE_THRESHOLD:
        return DIVERGED_VALUE
    return value


def aggregate(values) -> Aggregate:
    """Mean with population (n) and sample (n-1) standard deviations; divergent
    values (non-finite or above 10) count as 1.0. A single value gets std 0 and
    is flagged."""
    raw = [float(v) for v in values]
    if not raw:
        raise ConfigError("need at least one value")
    vals = np.array([clamp_divergent(v) for v in raw])
    n_div = sum(1 for v in raw if clamp_divergent(v) != v)
    if vals.size == 1:
        return Aggregate(float(vals[0]), 0.0, 0.0, 1, n_div, single_seed=True)
    return Aggregate(float(vals.mean()), float(vals.std(ddof=0)), float(vals.std(ddof=1)),
                     int(vals.size), n_div)


@dataclass
class SeedRuns:
    config: ExperimentConfig
    records: list
    aggregate: Aggregate

    def summary_rows(self) -> list[dict]:
        cfg = self.config
        return [{"task": cfg.task, "model_tag": cfg.tag, "protocol": cfg.protocol, "seed": r.seed,
                 "params": r.params, "test_rel_l2": r.test_rel_l2, "wall_clock_s": r.wall_clock_s}
                for r in self.records]

    def aggregate_row(self) -> dict:
        cfg, agg = self.config, self.aggregate
        return {"task": cfg.task, "model_tag": cfg.tag, "protocol": cfg.protocol, "n_seeds": agg.n,
                "params": self.records[0].params, "mean": agg.mean, "std": agg.std,
                "std_sample": agg.std_sample, "n_divergent": agg.n_divergent,
                "wall_clock_s": float(np.mean([r.wall_clock_s for r in self.records]))}


def run_one(cfg: ExperimentConfig, seed: int, splits=None, out_dir=None,
            callback: Callable | None = None) -> RunRecord:
    """Build, train and (optionally) persist one seed of an experiment."""
    if splits is None:
        splits = cfg.data.load()
    model = ZnoModel(cfg.model, seed=None)
    rec = train(model, splits, cfg.loss, cfg.optim, seed, callback=callback)
    rec.config = cfg.to_dict()
    if out_dir is not None:
        run_dir = Path(out_dir) / cfg.tag / str(seed)
        save_checkpoint(run_dir / "model.ckpt", model, {"seed": seed, "best_val_epoch": rec.best_val_epoch})
        rec.pole_export_path = str(write_pole_csv(run_dir / "poles.csv", model))
        rec.save(run_dir / "record.json")
    return rec


def _run_one_remote(cfg_dict, seed, out_dir):
    return run_one(ExperimentConfig.from_dict(cfg_dict), seed, out_dir=out_dir).to_dict()


def run_seeds(cfg: ExperimentConfig, seeds, out_dir=None, jobs: int = 1) -> SeedRuns:
    """Train one run per seed on the same dataset and aggregate the test metric."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_one_remote, cfg.to_dict(), s, out_dir) for s in seeds]
            records = [RunRecord(**f.result()) for f in futs]
    else:
        splits = cfg.data.load()
        records = [run_one(cfg, s, splits, out_dir) for s in seeds]
    runs = SeedRuns(cfg, records, aggregate([r.test_rel_l2 for r in records]))
    if out_dir is not None:
        base = Path(out_dir) / cfg.tag
        write_csv(base / "summary.csv", runs.summary_rows(), SUMMARY_COLUMNS)
        write_csv(base / "aggregate.csv", [runs.aggregate_row()], AGGREGATE_COLUMNS)
    return runs


# ---------------------------------------------------------------------------
# csv


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, extrasaction="raise")
        wr.writeheader()
        for row in rows:
            wr.writerow(row)
    return path


def read_csv(path) -> list[dict]:
    """Read a CSV written by ``write_csv``; numeric fields are converted back."""
    def conv(v):
        for t in (int, float):
            try:
                return t(v)
            except ValueError:
                pass
        return v

    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


POLE_COLUMNS = ["layer", "channel", "index", "re", "im", "abs", "residue_abs"]


def write_pole_csv(path, model: ZnoModel) -> Path:
    rows = [{"layer": r["layer"], "channel": r["channel"], "index": r["index"],
             "re": r["pole"].real, "im": r["pole"].imag, "abs": abs(r["pole"]),
             "residue_abs": r["residue_abs"]} for r in export_poles(model)]
    return write_csv(path, rows, POLE_COLUMNS)


def output_root(default="runs") -> Path:
    return Path(os.environ.get("ZNO_OUT", default))
