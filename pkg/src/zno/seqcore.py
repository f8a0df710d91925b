"""Core containers: trajectory batches, flat parameter storage, seeded RNG streams,
and the binary dataset format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration, shape or index."""


class UsageError(RuntimeError):
    """API called in the wrong order (e.g. backward before forward)."""


@dataclass(frozen=True)
class TrajectoryBatch:
    """Batch-major input/output sequences, ``inputs[B, T, d_u]`` and ``targets[B, T, d_y]``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        u, y = np.asarray(self.inputs), np.asarray(self.targets)
        if u.ndim != 3 or y.ndim != 3:
            raise ConfigError(f"expected 3-d arrays, got {u.shape} and {y.shape}")
        if u.shape[:2] != y.shape[:2]:
            raise ConfigError(f"inputs {u.shape} and targets {y.shape} disagree on (B, T)")
        if u.shape[1] < 1 or u.shape[2] < 1 or y.shape[2] < 1:
            raise ConfigError("T, d_u and d_y must be positive")
        u = np.array(u, copy=True)
        y = np.array(y, copy=True)
        u.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "targets", y)

    @property
    def B(self) -> int:
        return self.inputs.shape[0]

    @property
    def T(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_u(self) -> int:
        return self.inputs.shape[2]

    @property
    def d_y(self) -> int:
        return self.targets.shape[2]

    def __len__(self) -> int:
        return self.B

    def take(self, index) -> "TrajectoryBatch":
        return TrajectoryBatch(self.inputs[index], self.targets[index])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.inputs).all() and np.isfinite(self.targets).all())


def split_dataset(full: TrajectoryBatch, n_train: int, n_val: int, n_test: int):
    """Split by leading index into (train, val, test); no shuffling."""
    sizes = (n_train, n_val, n_test)
    if min(sizes) < 0 or sum(sizes) != full.B:
        raise ConfigError(f"split {sizes} does not partition B={full.B}")
    a, b = n_train, n_train + n_val
    return full.take(slice(0, a)), full.take(slice(a, b)), full.take(slice(b, full.B))


def slice_time(batch: TrajectoryBatch, start: int, stop: int) -> TrajectoryBatch:
    """Time window ``[start, stop)`` of both inputs and targets."""
    if not (0 <= start < stop <= batch.T):
        raise ConfigError(f"invalid window [{start}, {stop}) for T={batch.T}")
    return TrajectoryBatch(batch.inputs[:, start:stop], batch.targets[:, start:stop])


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamStore:
    """Flat parameter vector with a paired gradient vector and a named layout.

    ``view(name)`` and ``grad(name)`` return reshaped views into the flat
    buffers, so writing through them updates the store in place.
    """

    def __init__(self, segments: Iterable[tuple[str, Sequence[int]]], dtype=np.float64):
        layout = {}
        offset = 0
        for name, shape in segments:
            if name in layout:
                raise ConfigError(f"duplicate segment {name!r}")
            seg = Segment(name, offset, tuple(int(s) for s in shape))
            layout[name] = seg
            offset += seg.size
        self.layout: dict[str, Segment] = layout
        self.values = np.zeros(offset, dtype=dtype)
        self.grads = np.zeros(offset, dtype=dtype)

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def _slice(self, name):
        try:
            seg = self.layout[name]
        except KeyError:
            raise KeyError(f"no parameter segment {name!r}") from None
        return seg, slice(seg.offset, seg.offset + seg.size)

    def view(self, name: str) -> np.ndarray:
        seg, sl = self._slice(name)
        return self.values[sl].reshape(seg.shape)

    def grad(self, name: str) -> np.ndarray:
        seg, sl = self._slice(name)
        return self.grads[sl].reshape(seg.shape)

    def get(self, name: str) -> np.ndarray:
        return self.view(name).copy()

    def set(self, name: str, value) -> None:
        seg, sl = self._slice(name)
        value = np.asarray(value, dtype=self.values.dtype)
        if value.shape != seg.shape:
            value = np.broadcast_to(value, seg.shape)
        self.values[sl] = value.ravel()

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RngStream:
    """Deterministic Philox stream keyed by ``(seed, label)``.

    Child streams append to the label, so independent consumers (data
    generation, initialisation, shuffling) never share draws regardless of
    call order.
    """

    seed: int
    label: str = ""

    def child(self, *keys) -> "RngStream":
        parts = [self.label] if self.label else []
        parts.extend(str(k) for k in keys)
        return RngStream(self.seed, "/".join(parts))

    def generator(self) -> np.random.Generator:
        digest = hashlib.blake2b(self.label.encode(), digest_size=16).digest()
        words = list(np.frombuffer(digest, dtype="<u4"))
        seed = int(self.seed) & (2**64 - 1)
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, *map(int, words)])
        return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# dataset files

DATASET_MAGIC = b"ZNODSET\x00"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIQQQQ")


def save_dataset(path, batch: TrajectoryBatch, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``batch`` to ``path`` plus a ``<path>.json`` sidecar.

    Layout: 8-byte magic, uint32 version, uint64 B, T, d_u, d_y (all
    little-endian), then inputs and targets as float64 little-endian in
    C order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, batch.B, batch.T, batch.d_u, batch.d_y))
        fh.write(np.ascontiguousarray(batch.inputs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.targets, dtype="<f8").tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta or {}, indent=2, sort_keys=True))
    return path, sidecar


def load_dataset(path) -> tuple[TrajectoryBatch, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: truncated header")
    magic, version, B, T, d_u, d_y = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise ConfigError(f"{path}: unsupported version {version}")
    n_u, n_y = B * T * d_u, B * T * d_y
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != n_u + n_y:
        raise ConfigError(f"{path}: expected {n_u + n_y} values, found {body.size}")
    batch = TrajectoryBatch(body[:n_u].reshape(B, T, d_u), body[n_u:].reshape(B, T, d_y))
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return batch, meta
