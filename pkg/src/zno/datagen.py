"""Synthetic discrete-time system-identification tasks.

Three families: a resonant second-order ARMA plant with a 4-tap MA numerator,
a cascade of three biquads (sixth order), and a scalar NARX recurrence whose
parameters are hidden from the model. All are driven by AR(1) coloured noise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .seqcore import ConfigError, RngStream, TrajectoryBatch


class Family(str, enum.Enum):
    ResonantArma = "arma"
    IirCascade6 = "iir"
    NarxScalar = "narx"


CHANNELS = {Family.ResonantArma: 7, Family.IirCascade6: 16, Family.NarxScalar: 1}

DIFFICULTY_BINS = (
    (0.90, 0.93),
    (0.93, 0.96),
    (0.96, 0.98),
    (0.98, 0.99),
    (0.99, 0.995),
)

NARX_RANGES = {"a1": (0.2, 0.6), "a2": (-0.3, 0.1), "gain": (0.15, 0.45)}


def difficulty_bins() -> list[tuple[float, float]]:
    """The five pole-radius bins of the near-unit-circle sweep, easiest first."""
    return list(DIFFICULTY_BINS)


def memory_horizon(rho: float) -> float:
    """Dominant impulse-response time constant ``-1/ln(rho)`` in steps."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    return -1.0 / math.log(rho)


@dataclass(frozen=True)
class ForcingSpec:
    kind: str = "ColoredAR1"
    ar_coeff: float = 0.9
    normalize: bool = True

    def __post_init__(self):
        if self.kind != "ColoredAR1":
            raise ConfigError(f"unknown forcing kind {self.kind!r}")
        if not -1.0 < self.ar_coeff < 1.0:
            raise ConfigError(f"|ar_coeff| must be < 1, got {self.ar_coeff}")


_DEFAULT_RANGES = {
    Family.ResonantArma: ((0.9, 0.995), (0.05 * math.pi, 0.45 * math.pi)),
    Family.IirCascade6: ((0.88, 0.995), (0.05 * math.pi, 0.95 * math.pi)),
    # unused by NARX, kept so every TaskSpec satisfies the same invariants
    Family.NarxScalar: ((0.9, 0.995), (0.05 * math.pi, 0.45 * math.pi)),
}


@dataclass(frozen=True)
class TaskSpec:
    family: Family
    n_traj: int
    T: int
    seed: int = 0
    rho_range: tuple = None
    phi_range: tuple = None
    forcing: ForcingSpec = field(default_factory=ForcingSpec)

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        rho, phi = _DEFAULT_RANGES[fam]
        if self.rho_range is None:
            object.__setattr__(self, "rho_range", rho)
        if self.phi_range is None:
            object.__setattr__(self, "phi_range", phi)
        object.__setattr__(self, "rho_range", tuple(float(v) for v in self.rho_range))
        object.__setattr__(self, "phi_range", tuple(float(v) for v in self.phi_range))
        if isinstance(self.forcing, dict):
            object.__setattr__(self, "forcing", ForcingSpec(**self.forcing))
        lo, hi = self.rho_range
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"rho_range must satisfy 0 < low < high < 1, got {self.rho_range}")
        lo, hi = self.phi_range
        if not 0.0 < lo < hi < math.pi:
            raise ConfigError(f"phi_range must satisfy 0 < low < high < pi, got {self.phi_range}")
        if self.n_traj < 1 or self.T < 1:
            raise ConfigError("n_traj and T must be positive")

    @property
    def d_u(self) -> int:
        return CHANNELS[self.family]

    @property
    def d_y(self) -> int:
        return 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["forcing"] = ForcingSpec(**d.get("forcing", {}))
        return cls(**d)


def arma_spec(n_traj: int, T: int, seed: int = 0, bin: int | None = None, **kw) -> TaskSpec:
    """Resonant ARMA task, optionally restricted to one difficulty bin."""
    if bin is not None:
        if not 0 <= bin < len(DIFFICULTY_BINS):
            raise ConfigError(f"bin must be in 0..{len(DIFFICULTY_BINS) - 1}, got {bin}")
        kw["rho_range"] = DIFFICULTY_BINS[bin]
    return TaskSpec(Family.ResonantArma, n_traj=n_traj, T=T, seed=seed, **kw)


# ---------------------------------------------------------------------------
# forcing


def ar1_forcing(spec: ForcingSpec, eps: np.ndarray) -> np.ndarray:
    x = lfilter([1.0], [1.0, -spec.ar_coeff], eps, axis=-1)
    if spec.normalize:
        x = x / x.std(axis=-1, keepdims=True)
    return x


def gen_forcing(spec: ForcingSpec, n: int, T: int, rng: RngStream) -> np.ndarray:
    """``[n, T]`` AR(1) coloured noise; trajectory ``j`` draws from ``rng.child(j)``."""
    if T < 1 or n < 0:
        raise ConfigError("need T >= 1 and n >= 0")
    eps = np.empty((n, T))
    for j in range(n):
        eps[j] = rng.child(j).generator().standard_normal(T)
    return ar1_forcing(spec, eps)


# ---------------------------------------------------------------------------
# plants


def arma_response(x: np.ndarray, a1: float, a2: float, ma) -> np.ndarray:
    """``y_n = a1 y_{n-1} + a2 y_{n-2} + sum_j ma_j x_{n-j}`` with zero initial state."""
    return lfilter(np.asarray(ma, dtype=float), [1.0, -a1, -a2], x)


def biquad_cascade_response(x: np.ndarray, sections) -> np.ndarray:
    """Apply biquads ``(b0, b1, b2, a1, a2)`` in series, using the feedback sign
    convention ``y_n = b0 x_n + b1 x_{n-1} + b2 x_{n-2} + a1 y_{n-1} + a2 y_{n-2}``."""
    y = np.asarray(x, dtype=float)
    for b0, b1, b2, a1, a2 in sections:
        y = lfilter([b0, b1, b2], [1.0, -a1, -a2], y)
    return y


def narx_response(x: np.ndarray, a1, a2, gain) -> np.ndarray:
    """NARX recurrence, vectorised over leading axes of ``x[..., T]``."""
    x = np.asarray(x, dtype=float)
    a1, a2, gain = (np.asarray(v, dtype=float) for v in (a1, a2, gain))
    y = np.zeros_like(x)
    y1 = np.zeros(x.shape[:-1])
    y2 = np.zeros(x.shape[:-1])
    x_prev = np.zeros(x.shape[:-1])
    log2 = math.log(2.0)
    for n in range(x.shape[-1]):
        xn = x[..., n]
        yn = (a1 * y1 + a2 * y2
              + gain * (np.logaddexp(0.0, xn + 0.5 * x_prev) - log2)
              + 0.08 * np.tanh(y1 * xn))
        y[..., n] = yn
        y2, y1, x_prev = y1, yn, xn
    return y


def _nonzero_uniform(g: np.random.Generator, floor: float = 0.1) -> float:
    while True:
        v = g.uniform(-1.0, 1.0)
        if abs(v) >= floor:
            return v


def _check_family(spec: TaskSpec, family: Family):
    if spec.family is not family:
        raise ConfigError(f"expected a {family.value} TaskSpec, got {spec.family.value}")


def _default_stream(spec: TaskSpec) -> RngStream:
    return RngStream(spec.seed, f"datagen/{spec.family.value}")


def _forcing_for(spec: TaskSpec, rng: RngStream) -> np.ndarray:
    return gen_forcing(spec.forcing, spec.n_traj, spec.T, rng.child("forcing"))


def sample_arma_params(spec: TaskSpec, g: np.random.Generator) -> dict:
    rho = g.uniform(*spec.rho_range)
    phi = g.uniform(*spec.phi_range)
    ma = [_nonzero_uniform(g)] + list(g.uniform(-1.0, 1.0, size=3))
    return {"rho": rho, "phi": phi, "a1": 2.0 * rho * math.cos(phi), "a2": -rho * rho, "ma": ma}


def gen_resonant_arma(spec: TaskSpec, rng: RngStream | None = None, return_params: bool = False):
    """Resonant ARMA batch with input channels ``[x, a1, a2, m0, m1, m2, m3]``."""
    _check_family(spec, Family.ResonantArma)
    rng = rng or _default_stream(spec)
    x = _forcing_for(spec, rng)
    u = np.empty((spec.n_traj, spec.T, 7))
    y = np.empty((spec.n_traj, spec.T, 1))
    params = []
    for j in range(spec.n_traj):
        p = sample_arma_params(spec, rng.child("params", j).generator())
        params.append(p)
        u[j, :, 0] = x[j]
        u[j, :, 1:] = [p["a1"], p["a2"], *p["ma"]]
        y[j, :, 0] = arma_response(x[j], p["a1"], p["a2"], p["ma"])
    batch = TrajectoryBatch(u, y)
    return (batch, params) if return_params else batch


def sample_biquads(spec: TaskSpec, g: np.random.Generator) -> list[tuple]:
    sections = []
    for _ in range(3):
        rho = g.uniform(*spec.rho_range)
        phi = g.uniform(*spec.phi_range)
        b0 = _nonzero_uniform(g)
        b1, b2 = g.uniform(-1.0, 1.0, size=2)
        sections.append((b0, b1, b2, 2.0 * rho * math.cos(phi), -rho * rho))
    return sections


def gen_iir_cascade(spec: TaskSpec, rng: RngStream | None = None, return_params: bool = False):
    """Sixth-order cascade; inputs ``[x, (b0, b1, b2, a1, a2) x 3]``."""
    _check_family(spec, Family.IirCascade6)
    rng = rng or _default_stream(spec)
    x = _forcing_for(spec, rng)
    u = np.empty((spec.n_traj, spec.T, 16))
    y = np.empty((spec.n_traj, spec.T, 1))
    params = []
    for j in range(spec.n_traj):
        sections = sample_biquads(spec, rng.child("params", j).generator())
        params.append(sections)
        u[j, :, 0] = x[j]
        u[j, :, 1:] = np.ravel(sections)
        y[j, :, 0] = biquad_cascade_response(x[j], sections)
    batch = TrajectoryBatch(u, y)
    return (batch, params) if return_params else batch


def sample_narx_params(g: np.random.Generator) -> dict:
    return {k: g.uniform(*NARX_RANGES[k]) for k in ("a1", "a2", "gain")}


def gen_narx(spec: TaskSpec, rng: RngStream | None = None, return_params: bool = False):
    """Scalar NARX batch; the per-trajectory parameters are not exposed (d_u = 1)."""
    _check_family(spec, Family.NarxScalar)
    rng = rng or _default_stream(spec)
    x = _forcing_for(spec, rng)
    params = [sample_narx_params(rng.child("params", j).generator()) for j in range(spec.n_traj)]
    a1, a2, gain = (np.array([p[k] for p in params]) for k in ("a1", "a2", "gain"))
    y = narx_response(x, a1, a2, gain)
    batch = TrajectoryBatch(x[:, :, None], y[:, :, None])
    return (batch, params) if return_params else batch


GENERATORS = {
    Family.ResonantArma: gen_resonant_arma,
    Family.IirCascade6: gen_iir_cascade,
    Family.NarxScalar: gen_narx,
}


def generate(spec: TaskSpec, rng: RngStream | None = None) -> TrajectoryBatch:
    batch = GENERATORS[spec.family](spec, rng)
    if not batch.is_finite():
        raise FloatingPointError(f"non-finite values generated for {spec}")
    return batch
