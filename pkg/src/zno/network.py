"""Full ZNO network: pointwise lift, L residual rational layers with GELU, and a
two-layer pointwise projection head."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .seqcore import ConfigError, ParamStore, RngStream, UsageError
from .zlayer import (BackwardMode, LayerParams, LayerShape, PoleMode, constrain_poles,
                     init_layer, layer_backward, layer_forward, rowwise)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return x * _phi(x)


def gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = _phi(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class ZnoConfig:
    w: int
    L: int
    r: int
    K: int
    F: int = 0
    d_u: int = 1
    d_y: int = 1
    pole_mode: PoleMode = PoleMode.ZPlane
    proj_hidden: int = 128
    backward_mode: BackwardMode = BackwardMode.SaveHistory
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "pole_mode", PoleMode(self.pole_mode))
        object.__setattr__(self, "backward_mode", BackwardMode(self.backward_mode))
        if min(self.w, self.L, self.r, self.K, self.d_u, self.d_y, self.proj_hidden) < 1 or self.F < 0:
            raise ConfigError(f"invalid ZNO configuration {self}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.r > self.w:
            warnings.warn(f"rank r={self.r} exceeds width w={self.w}", stacklevel=3)

    @property
    def layer_shape(self) -> LayerShape:
        return LayerShape(self.w, self.r, self.K, self.F)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pole_mode"] = self.pole_mode.value
        d["backward_mode"] = self.backward_mode.value
        return d


def count_params(config: ZnoConfig) -> int:
    """Analytic parameter count.

    Per layer: ``2rw + w^2 + w + 2Kr + [F>0] r(F+1)``; with an odd ``K`` the
    extra real pole and real residue still add up to ``K r`` each. Lift and
    the two projection maps carry biases.
    """
    w, L, r, K, F = config.w, config.L, config.r, config.K, config.F
    layer = 2 * r * w + w * w + w + 2 * K * r + (r * (F + 1) if F > 0 else 0)
    ph = config.proj_hidden
    return (L * layer
            + config.d_u * w + w
            + w * ph + ph
            + ph * config.d_y + config.d_y)


def _segments(cfg: ZnoConfig):
    segs = [("lift.W", (cfg.w, cfg.d_u)), ("lift.b", (cfg.w,))]
    for l in range(cfg.L):
        segs += cfg.layer_shape.segments(f"layers.{l}.")
    segs += [("proj1.W", (cfg.proj_hidden, cfg.w)), ("proj1.b", (cfg.proj_hidden,)),
             ("proj2.W", (cfg.d_y, cfg.proj_hidden)), ("proj2.b", (cfg.d_y,))]
    return segs


class ZnoModel:
    """Owns the flat parameter vector; ``layers[l]`` and ``layer_grads[l]`` are views into it."""

    def __init__(self, config: ZnoConfig, seed: int | None = 0):
        self.config = config
        self.params = ParamStore(_segments(config), dtype=np.dtype(config.dtype))
        shape = config.layer_shape
        self.layers = [LayerParams.from_store(self.params, shape, config.pole_mode, f"layers.{l}.")
                       for l in range(config.L)]
        self.layer_grads = [LayerParams.from_store(self.params, shape, config.pole_mode,
                                                   f"layers.{l}.", grads=True)
                            for l in range(config.L)]
        self._tape = None
        if seed is not None:
            self.initialize(seed)

    def __len__(self) -> int:
        return self.params.size

    def initialize(self, seed: int) -> None:
        stream = RngStream(seed, "init")
        cfg = self.config

        def fan_in(name, n, g):
            bound = 1.0 / math.sqrt(n)
            self.params.set(name, g.uniform(-bound, bound, size=self.params.layout[name].shape))

        g = stream.child("lift").generator()
        fan_in("lift.W", cfg.d_u, g)
        fan_in("lift.b", cfg.d_u, g)
        for l, layer in enumerate(self.layers):
            init_layer(layer, stream.child("layer", l).generator())
        g = stream.child("proj").generator()
        fan_in("proj1.W", cfg.w, g)
        fan_in("proj1.b", cfg.w, g)
        fan_in("proj2.W", cfg.proj_hidden, g)
        fan_in("proj2.b", cfg.proj_hidden, g)
        self._tape = None

    # -- forward / backward ------------------------------------------------

    def _check_input(self, u):
        u = np.asarray(u, dtype=self.params.values.dtype)
        if u.ndim != 3 or u.shape[2] != self.config.d_u:
            raise ConfigError(f"expected input [B, T, {self.config.d_u}], got {u.shape}")
        return u

    def forward(self, u, keep: bool = True) -> np.ndarray:
        """Map ``u[B, T, d_u]`` to ``y[B, T, d_y]``; with ``keep`` the activations
        are retained for ``backward``."""
        u = self._check_input(u)
        P = self.params
        mode = self.config.backward_mode
        h = rowwise(u, P.view("lift.W")) + P.view("lift.b")
        tape = {"u": u, "layers": []}
        for layer in self.layers:
            pre, work = layer_forward(h, layer, mode)
            cdf = _phi(pre)
            if keep:
                tape["layers"].append((pre, cdf, work))
            h = pre * cdf
        z1 = rowwise(h, P.view("proj1.W")) + P.view("proj1.b")
        cdf1 = _phi(z1)
        a1 = z1 * cdf1
        y = rowwise(a1, P.view("proj2.W")) + P.view("proj2.b")
        if keep:
            tape.update(hL=h, z1=z1, cdf1=cdf1, a1=a1)
            self._tape = tape
        return y

    def predict(self, u) -> np.ndarray:
        return self.forward(u, keep=False)

    def backward(self, out_grad) -> None:
        """Accumulate gradients of ``sum(out_grad * y)`` into ``params.grads``."""
        if self._tape is None:
            raise UsageError("backward called before forward")
        t = self._tape
        P = self.params
        out_grad = np.asarray(out_grad, dtype=P.values.dtype)

        def affine_grad(prefix, x, g):
            n_in = x.shape[-1]
            P.grad(prefix + ".W")[...] += g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, n_in)
            P.grad(prefix + ".b")[...] += g.reshape(-1, g.shape[-1]).sum(axis=0)
            return g @ P.view(prefix + ".W")

        g = affine_grad("proj2", t["a1"], out_grad)
        g = g * gelu_grad(t["z1"], t["cdf1"])
        g = affine_grad("proj1", t["hL"], g)
        for l in range(self.config.L - 1, -1, -1):
            pre, cdf, work = t["layers"][l]
            g = g * gelu_grad(pre, cdf)
            g, _ = layer_backward(work, g, self.layers[l], self.layer_grads[l])
        affine_grad("lift", t["u"], g)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def poles(self):
        """Constrained poles per layer as ``[(p[r, Kc], p_real[r] or None), ...]``."""
        return [constrain_poles(layer.pole_bank) for layer in self.layers]

    def max_pole_modulus(self) -> float:
        m = 0.0
        for p, pr in self.poles():
            m = max(m, float(np.abs(p).max(initial=0.0)))
            if pr is not None:
                m = max(m, float(np.abs(pr).max()))
        return m


def export_poles(model: ZnoModel) -> list[dict]:
    """One row per pole (upper member of each conjugate pair, then the real pole)."""
    rows = []
    for l, (layer, (p, pr)) in enumerate(zip(model.layers, model.poles())):
        c = layer.residues
        for a in range(p.shape[0]):
            for k in range(p.shape[1]):
                rows.append({"layer": l, "channel": a, "index": k, "pole": complex(p[a, k]),
                             "residue_abs": float(abs(c[a, k]))})
            if pr is not None:
                rows.append({"layer": l, "channel": a, "index": p.shape[1], "pole": complex(pr[a]),
                             "residue_abs": float(abs(layer.real_res[a]))})
    return rows


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ZNOCKPT\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIQ")


def save_checkpoint(path, model: ZnoModel, extra: dict | None = None) -> Path:
    """Header (magic, version, JSON length, P), UTF-8 JSON config, float64 values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(meta), model.params.size))
        fh.write(meta)
        fh.write(np.ascontiguousarray(model.params.values, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ZnoModel, dict]:
    raw = Path(path).read_bytes()
    magic, version, n_meta, P = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a ZNO checkpoint")
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    meta = json.loads(raw[off:off + n_meta])
    model = ZnoModel(ZnoConfig(**meta["config"]), seed=None)
    if model.params.size != P:
        raise ConfigError(f"{path}: parameter count {P} does not match config ({model.params.size})")
    model.params.values[:] = np.frombuffer(raw, dtype="<f8", offset=off + n_meta, count=P)
    return model, meta.get("extra", {})
