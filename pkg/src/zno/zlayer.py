"""One ZNO residual layer.

The rational branch routes ``w`` channels through ``r`` latent scalar filters:

    b_n = B h_n
    s_n[k] = p[k] * s_{n-1}[k] + b_n             (complex, one state per conjugate pair)
    q_n = 2 Re(sum_k c[k] s_n[k]) + c_r s^r_n + sum_j g_j b_{n-j}
    out_n = A q_n + W h_n + bias

Poles live strictly inside the disk of radius ``RHO_MAX`` through a smooth
reparameterisation (z-plane: radius ``RHO_MAX * sigmoid(rho_tilde)``; s-plane
variant: ``exp(-softplus(alpha) + i omega)``). Gradients are hand-derived
adjoints of the scan, available in two modes that trade memory for a second
sequential pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from .seqcore import ConfigError, ParamStore, UsageError

RHO_MAX = 0.999
_RECOMPUTE_CHUNK = 128


class PoleMode(str, enum.Enum):
    ZPlane = "z"
    SPlaneIso = "s-iso"


class BackwardMode(str, enum.Enum):
    SaveHistory = "save_history"
    Recompute = "recompute"


@dataclass(frozen=True)
class LayerShape:
    w: int
    r: int
    K: int
    F: int = 0

    def __post_init__(self):
        if self.w < 1 or self.r < 1 or self.K < 1 or self.F < 0:
            raise ConfigError(f"invalid layer shape {self}")

    @property
    def Kc(self) -> int:
        return self.K // 2

    @property
    def odd(self) -> bool:
        return self.K % 2 == 1

    def segments(self, prefix: str = "") -> list[tuple[str, tuple]]:
        w, r, Kc = self.w, self.r, self.Kc
        segs = [
            ("B_in", (r, w)),
            ("A_out", (w, r)),
            ("W_skip", (w, w)),
            ("bias", (w,)),
            ("res_re", (r, Kc)),
            ("res_im", (r, Kc)),
        ]
        if self.odd:
            segs.append(("real_res", (r,)))
        segs += [("rho_tilde", (r, Kc)), ("phi", (r, Kc))]
        if self.odd:
            segs.append(("real_rho_tilde", (r,)))
        if self.F > 0:
            segs.append(("fir", (r, self.F + 1)))
        return [(prefix + name, shape) for name, shape in segs]

    @property
    def n_params(self) -> int:
        w, r, K, F = self.w, self.r, self.K, self.F
        return 2 * r * w + w * w + w + 2 * K * r + (r * (F + 1) if F > 0 else 0)


@dataclass
class PoleBank:
    """Unconstrained pole parameters. In ``SPlaneIso`` mode ``rho_tilde`` holds
    the decay parameter alpha and ``phi`` the angular frequency omega."""

    mode: PoleMode
    rho_tilde: np.ndarray
    phi: np.ndarray
    real_rho_tilde: np.ndarray | None = None
    rho_max: float = RHO_MAX

    @property
    def Kc(self) -> int:
        return self.rho_tilde.shape[1]

    @property
    def K(self) -> int:
        return 2 * self.Kc + (self.real_rho_tilde is not None)


@dataclass
class LayerParams:
    B_in: np.ndarray
    A_out: np.ndarray
    W_skip: np.ndarray
    bias: np.ndarray
    res_re: np.ndarray
    res_im: np.ndarray
    pole_bank: PoleBank
    real_res: np.ndarray | None = None
    fir: np.ndarray | None = None

    @property
    def shape(self) -> LayerShape:
        r, w = self.B_in.shape
        F = 0 if self.fir is None else self.fir.shape[1] - 1
        return LayerShape(w, r, self.pole_bank.K, F)

    @property
    def residues(self) -> np.ndarray:
        return self.res_re + 1j * self.res_im

    @classmethod
    def from_store(cls, store: ParamStore, shape: LayerShape, mode=PoleMode.ZPlane,
                   prefix: str = "", grads: bool = False) -> "LayerParams":
        get = store.grad if grads else store.view

        def opt(name):
            key = prefix + name
            return get(key) if key in store else None

        bank = PoleBank(PoleMode(mode), get(prefix + "rho_tilde"), get(prefix + "phi"),
                        opt("real_rho_tilde"))
        return cls(get(prefix + "B_in"), get(prefix + "A_out"), get(prefix + "W_skip"),
                   get(prefix + "bias"), get(prefix + "res_re"), get(prefix + "res_im"),
                   bank, opt("real_res"), opt("fir"))

    def zeros_like(self) -> "LayerParams":
        def z(a):
            return None if a is None else np.zeros_like(a)

        bank = self.pole_bank
        return LayerParams(z(self.B_in), z(self.A_out), z(self.W_skip), z(self.bias),
                           z(self.res_re), z(self.res_im),
                           PoleBank(bank.mode, z(bank.rho_tilde), z(bank.phi), z(bank.real_rho_tilde),
                                    bank.rho_max),
                           z(self.real_res), z(self.fir))

    def arrays(self) -> dict[str, np.ndarray]:
        """Named arrays (pole parameters flattened in), skipping absent ones."""
        out = {}
        for f in fields(self):
            if f.name == "pole_bank":
                bank = self.pole_bank
                for name in ("rho_tilde", "phi", "real_rho_tilde"):
                    if getattr(bank, name) is not None:
                        out[name] = getattr(bank, name)
            elif getattr(self, f.name) is not None:
                out[f.name] = getattr(self, f.name)
        return out


def new_layer(w: int, r: int, K: int, F: int = 0, mode=PoleMode.ZPlane, seed: int | None = 0):
    """Standalone layer backed by its own ``ParamStore``; returns ``(store, params, grads)``."""
    shape = LayerShape(w, r, K, F)
    store = ParamStore(shape.segments())
    params = LayerParams.from_store(store, shape, mode)
    grads = LayerParams.from_store(store, shape, mode, grads=True)
    if seed is not None:
        init_layer(params, np.random.default_rng(seed))
    return store, params, grads


# ---------------------------------------------------------------------------
# pole maps


def _softplus(x):
    return np.logaddexp(0.0, x)


def constrain_poles(bank: PoleBank):
    """Map unconstrained parameters to poles: ``(p[r, Kc] complex, p_real[r] or None)``."""
    p, _, _, pr, _ = _pole_jacobians(bank)
    return p, pr


def _pole_jacobians(bank: PoleBank):
    a, b = bank.rho_tilde, bank.phi
    if bank.mode is PoleMode.ZPlane:
        sig = expit(a)
        phase = np.exp(1j * b)
        p = bank.rho_max * sig * phase
        dp_da = bank.rho_max * sig * (1.0 - sig) * phase
    else:
        p = np.exp(-_softplus(a) + 1j * b)
        dp_da = -expit(a) * p
    dp_db = 1j * p
    pr = dpr = None
    if bank.real_rho_tilde is not None:
        ar = bank.real_rho_tilde
        if bank.mode is PoleMode.ZPlane:
            sig = expit(ar)
            pr = bank.rho_max * sig
            dpr = bank.rho_max * sig * (1.0 - sig)
        else:
            pr = np.exp(-_softplus(ar))
            dpr = -expit(ar) * pr
    return p, dp_da, dp_db, pr, dpr


def pole_radii(bank: PoleBank):
    """``(|p|, d|p|/d rho_tilde, |p_real|, d|p_real|/d real_rho_tilde)``.

    The modulus depends only on the radial parameter in both modes.
    """
    def radial(a):
        if bank.mode is PoleMode.ZPlane:
            sig = expit(a)
            return bank.rho_max * sig, bank.rho_max * sig * (1.0 - sig)
        rad = np.exp(-_softplus(a))
        return rad, -expit(a) * rad

    rad, drad = radial(bank.rho_tilde)
    if bank.real_rho_tilde is None:
        return rad, drad, None, None
    rr, drr = radial(bank.real_rho_tilde)
    return rad, drad, rr, drr


def set_poles(bank: PoleBank, poles, real_poles=None) -> None:
    """Write unconstrained parameters that reproduce the given poles (inverse map)."""
    poles = np.broadcast_to(np.asarray(poles, dtype=complex), bank.rho_tilde.shape)
    bank.rho_tilde[...] = _radial_inverse(bank, np.abs(poles))
    bank.phi[...] = np.angle(poles)
    if real_poles is not None:
        if bank.real_rho_tilde is None:
            raise ConfigError("bank has no real pole")
        real_poles = np.broadcast_to(np.asarray(real_poles, dtype=float), bank.real_rho_tilde.shape)
        if np.any(real_poles < 0):
            raise ConfigError("the real pole is restricted to [0, rho_max)")
        bank.real_rho_tilde[...] = _radial_inverse(bank, real_poles)


def _radial_inverse(bank: PoleBank, radius):
    radius = np.asarray(radius, dtype=float)
    if bank.mode is PoleMode.ZPlane:
        if np.any(radius >= bank.rho_max):
            raise ConfigError(f"pole radius must be < {bank.rho_max}")
        with np.errstate(divide="ignore"):
            x = radius / bank.rho_max
            out = np.log(x) - np.log1p(-x)
        return np.maximum(out, -1000.0)
    if np.any(radius >= 1.0):
        raise ConfigError("pole radius must be < 1")
    with np.errstate(divide="ignore"):
        decay = -np.log(radius)
        out = np.where(decay > 30, decay, np.log(np.expm1(np.minimum(decay, 30))))
    return np.minimum(out, 1000.0)


# ---------------------------------------------------------------------------
# initialisation


def init_layer(params: LayerParams, rng: np.random.Generator) -> None:
    """In-place initialisation.

    Radii ``RHO_MAX * sigmoid(U(1, 3))`` (about 0.73-0.95), phases spread over
    ``(0, pi)`` one per slot with jitter, residues ``N(0, 1/K^2)``, FIR taps
    ``N(0, 0.01^2)``, mixing matrices uniform with fan-in scaling. The s-plane
    variant reuses the same radii and phases through the inverse map.
    """
    shape = params.shape
    w, r, K, Kc = shape.w, shape.r, shape.K, shape.Kc

    def fan_in(a, n):
        bound = 1.0 / np.sqrt(n)
        a[...] = rng.uniform(-bound, bound, size=a.shape)

    fan_in(params.B_in, w)
    fan_in(params.A_out, r)
    fan_in(params.W_skip, w)
    fan_in(params.bias, w)
    params.res_re[...] = rng.normal(0.0, 1.0 / K, size=(r, Kc))
    params.res_im[...] = rng.normal(0.0, 1.0 / K, size=(r, Kc))
    if params.real_res is not None:
        params.real_res[...] = rng.normal(0.0, 1.0 / K, size=r)
    if params.fir is not None:
        params.fir[...] = rng.normal(0.0, 0.01, size=params.fir.shape)

    bank = params.pole_bank
    radii = RHO_MAX * expit(rng.uniform(1.0, 3.0, size=(r, Kc)))
    slots = np.arange(Kc)[None, :] + rng.uniform(0.0, 1.0, size=(r, Kc))
    phases = np.pi * slots / max(Kc, 1)
    real = RHO_MAX * expit(rng.uniform(1.0, 3.0, size=r)) if bank.real_rho_tilde is not None else None
    set_poles(bank, radii * np.exp(1j * phases), real)


# ---------------------------------------------------------------------------
# scan


@dataclass
class ScanWork:
    """State retained between forward and backward.

    ``states`` is stored time-major ``[T, B, r, Kc]`` (SaveHistory only);
    ``final_state`` is ``[B, r, Kc]``. Real-pole states carry a trailing
    axis of length one.
    """

    mode: BackwardMode
    h: np.ndarray
    b: np.ndarray
    q: np.ndarray
    poles: np.ndarray
    real_pole: np.ndarray | None
    final_state: np.ndarray
    final_real_state: np.ndarray | None = None
    states: np.ndarray | None = None
    real_states: np.ndarray | None = None


def _scan(p, bt, s, out):
    """Run ``s <- p*s + b_n`` over ``bt[n]`` writing each state into ``out[n]``."""
    for n in range(bt.shape[0]):
        s = p * s
        s += bt[n][..., None]
        out[n] = s
    return s


def _scan_chunks(p, bt, dtype, B, chunk):
    """Yield ``(start, states)`` blocks of the forward scan with bounded memory."""
    T = bt.shape[0]
    s = np.zeros((B,) + p.shape, dtype=dtype)
    buf = np.empty((min(chunk, T), B) + p.shape, dtype=dtype)
    for start in range(0, T, chunk):
        stop = min(start + chunk, T)
        view = buf[: stop - start]
        s = _scan(p, bt[start:stop], s, view)
        yield start, view


def rowwise(x, W):
    """``x @ W.T`` with a per-row reduction order that does not depend on the
    number of rows (BLAS blocking does), so a prefix of a sequence maps to
    bit-identical outputs."""
    return np.einsum("...k,jk->...j", x, W)


def _fir_apply(q, b, g):
    T = b.shape[1]
    for j in range(g.shape[1]):
        q[:, j:] += g[:, j] * b[:, : T - j]


def layer_forward(h: np.ndarray, params: LayerParams, mode=BackwardMode.SaveHistory):
    """Forward pass of one layer (before the nonlinearity).

    Returns ``(out[B, T, w], work)``; ``work`` is consumed by ``layer_backward``.
    """
    mode = BackwardMode(mode)
    h = np.asarray(h)
    shape = params.shape
    if h.ndim != 3 or h.shape[2] != shape.w:
        raise ConfigError(f"expected h of shape [B, T, {shape.w}], got {h.shape}")
    B_, T, _ = h.shape
    cdtype = np.result_type(h.dtype, np.complex64)
    b = rowwise(h, params.B_in)
    bt = np.ascontiguousarray(b.transpose(1, 0, 2))
    p, pr = constrain_poles(params.pole_bank)
    p = p.astype(cdtype)
    c = params.residues.astype(cdtype)
    q = np.zeros((T, B_, shape.r), dtype=h.dtype)
    work = ScanWork(mode, h, b, None, p, pr, None)

    if mode is BackwardMode.SaveHistory:
        S = np.empty((T, B_, shape.r, shape.Kc), dtype=cdtype)
        work.final_state = _scan(p, bt, np.zeros((B_, shape.r, shape.Kc), cdtype), S)
        q += 2.0 * np.einsum("tbrk,rk->tbr", S, c).real
        work.states = S
        if pr is not None:
            Sr = np.empty((T, B_, shape.r, 1), dtype=h.dtype)
            work.final_real_state = _scan(pr[:, None], bt, np.zeros((B_, shape.r, 1), h.dtype), Sr)
            q += params.real_res * Sr[..., 0]
            work.real_states = Sr
    else:
        for start, S in _scan_chunks(p, bt, cdtype, B_, _RECOMPUTE_CHUNK):
            q[start:start + len(S)] += 2.0 * np.einsum("tbrk,rk->tbr", S, c).real
        work.final_state = S[-1].copy()
        if pr is not None:
            for start, Sr in _scan_chunks(pr[:, None], bt, h.dtype, B_, _RECOMPUTE_CHUNK):
                q[start:start + len(Sr)] += params.real_res * Sr[..., 0]
            work.final_real_state = Sr[-1].copy()

    q = np.ascontiguousarray(q.transpose(1, 0, 2))
    if params.fir is not None:
        _fir_apply(q, b, params.fir)
    work.q = q
    out = rowwise(q, params.A_out) + rowwise(h, params.W_skip) + params.bias
    return out, work


def layer_backward(work: ScanWork | None, out_grad: np.ndarray, params: LayerParams,
                   grads: LayerParams | None = None):
    """Adjoint of ``layer_forward``. Gradients are *accumulated* into ``grads``
    (allocated as zeros when omitted); returns ``(h_grad, grads)``."""
    if work is None or work.q is None:
        raise UsageError("layer_backward called before layer_forward")
    if grads is None:
        grads = params.zeros_like()
    h, b, q = work.h, work.b, work.q
    B_, T, w = h.shape
    r = b.shape[2]
    g2 = out_grad.reshape(-1, w)
    gq = out_grad @ params.A_out
    grads.A_out += g2.T @ q.reshape(-1, r)
    grads.W_skip += g2.T @ h.reshape(-1, w)
    grads.bias += g2.sum(axis=0)

    db = np.zeros_like(b)
    if params.fir is not None:
        for j in range(params.fir.shape[1]):
            grads.fir[:, j] += np.einsum("btr,btr->r", gq[:, j:], b[:, : T - j])
            db[:, : T - j] += params.fir[:, j] * gq[:, j:]

    gqt = np.ascontiguousarray(gq.transpose(1, 0, 2))
    if work.mode is BackwardMode.SaveHistory:
        G_c, G_p, dbt, G_cr, G_pr = _adjoint_saved(work, gqt, params)
    else:
        G_c, G_p, dbt, G_cr, G_pr = _adjoint_recompute(work, gqt, params)
    db += dbt.transpose(1, 0, 2)

    _, dp_da, dp_db, _, dpr = _pole_jacobians(params.pole_bank)
    grads.res_re += G_c.real
    grads.res_im += G_c.imag
    gb = grads.pole_bank
    gb.rho_tilde += (np.conj(G_p) * dp_da).real
    gb.phi += (np.conj(G_p) * dp_db).real
    if G_cr is not None:
        grads.real_res += G_cr
        gb.real_rho_tilde += G_pr * dpr

    grads.B_in += db.reshape(-1, r).T @ h.reshape(-1, w)
    h_grad = db @ params.B_in + out_grad @ params.W_skip
    return h_grad, grads


def _adjoint_saved(work: ScanWork, gqt, params):
    # lambda_n = 2 gq_n conj(c) + conj(p) lambda_{n+1}
    S = work.states
    p = work.poles
    c = params.residues.astype(S.dtype)
    lam = 2.0 * gqt[..., None] * np.conj(c)
    pc = np.conj(p)
    for n in range(lam.shape[0] - 2, -1, -1):
        lam[n] += pc * lam[n + 1]
    G_c = 2.0 * np.einsum("tbr,tbrk->rk", gqt, np.conj(S))
    G_p = np.einsum("tbrk,tbrk->rk", lam[1:], np.conj(S[:-1]))
    dbt = lam.real.sum(axis=-1)
    G_cr = G_pr = None
    if work.real_pole is not None:
        Sr = work.real_states[..., 0]
        lr = gqt * params.real_res
        pr = work.real_pole
        for n in range(lr.shape[0] - 2, -1, -1):
            lr[n] += pr * lr[n + 1]
        G_cr = np.einsum("tbr,tbr->r", gqt, Sr)
        G_pr = np.einsum("tbr,tbr->r", lr[1:], Sr[:-1])
        dbt += lr
    return G_c, G_p, dbt, G_cr, G_pr


def _tangent_pass(p, bt, gqt, weight, cdtype, B_, chunk):
    """Forward recompute carrying the tangent ``D_n = ds_n/dp``.

    Returns ``sum gq conj(s)``, ``sum gq conj(weight*D)`` and the final state,
    all with O(B r K) working memory.
    """
    T = bt.shape[0]
    shape = (B_,) + p.shape
    s = np.zeros(shape, cdtype)
    D = np.zeros(shape, cdtype)
    n_ch = min(chunk, T)
    Sbuf = np.empty((n_ch,) + shape, cdtype)
    Dbuf = np.empty((n_ch,) + shape, cdtype)
    acc_s = np.zeros(p.shape, cdtype)
    acc_d = np.zeros(p.shape, cdtype)
    for start in range(0, T, chunk):
        stop = min(start + chunk, T)
        for i, n in enumerate(range(start, stop)):
            D = p * D + s
            s = p * s
            s += bt[n][..., None]
            Sbuf[i] = s
            Dbuf[i] = D
        g = gqt[start:stop][..., None]
        m = stop - start
        acc_s += np.einsum("tbrk->rk", g * np.conj(Sbuf[:m]))
        acc_d += np.einsum("tbrk->rk", g * np.conj(weight * Dbuf[:m]))
    return acc_s, acc_d, s


def _adjoint_chunks(pc, E, T, dtype, chunk):
    """Reverse scan ``lam_n = E(n) + pc * lam_{n+1}`` yielding ``sum_k Re(lam_n)`` per step."""
    out = None
    lam = None
    for stop in range(T, 0, -chunk):
        start = max(stop - chunk, 0)
        block = E(start, stop)
        for i in range(block.shape[0] - 1, -1, -1):
            if lam is not None:
                block[i] += pc * lam
            lam = block[i]
        red = block.real.sum(axis=-1)
        if out is None:
            out = np.empty((T,) + red.shape[1:], dtype=dtype)
        out[start:stop] = red
    return out


def _adjoint_recompute(work: ScanWork, gqt, params):
    T, B_, r = gqt.shape
    p = work.poles
    cdtype = p.dtype
    c = params.residues.astype(cdtype)
    bt = np.ascontiguousarray(work.b.transpose(1, 0, 2))
    chunk = _RECOMPUTE_CHUNK

    acc_s, acc_d, s_final = _tangent_pass(p, bt, gqt, c, cdtype, B_, chunk)
    if not np.array_equal(s_final, work.final_state):
        raise UsageError("parameters changed between forward and backward")
    G_c = 2.0 * acc_s
    G_p = 2.0 * acc_d

    cc = np.conj(c)
    dbt = _adjoint_chunks(np.conj(p), lambda a, z: 2.0 * gqt[a:z][..., None] * cc, T, gqt.dtype, chunk)

    G_cr = G_pr = None
    if work.real_pole is not None:
        pr = work.real_pole[:, None]
        cr = params.real_res[:, None]
        acc_s, acc_d, sr_final = _tangent_pass(pr, bt, gqt, cr, gqt.dtype, B_, chunk)
        if not np.array_equal(sr_final, work.final_real_state):
            raise UsageError("parameters changed between forward and backward")
        G_cr, G_pr = acc_s[:, 0], acc_d[:, 0]
        dbt = dbt + _adjoint_chunks(pr, lambda a, z: gqt[a:z][..., None] * cr, T, gqt.dtype, chunk)
    return G_c, G_p, dbt, G_cr, G_pr


# ---------------------------------------------------------------------------
# transfer function


def latent_transfer(params: LayerParams, z) -> np.ndarray:
    """Scalar latent filters ``G_a(z)`` for ``a = 1..r``; shape ``z.shape + (r,)``."""
    z = np.asarray(z, dtype=complex)
    p, pr = constrain_poles(params.pole_bank)
    pmax = max(np.abs(p).max(initial=0.0), 0.0 if pr is None else np.abs(pr).max())
    if np.any(np.abs(z) <= pmax):
        raise ValueError(f"|z| must exceed the largest pole modulus {pmax:.6g}")
    zi = (1.0 / z)[..., None, None]
    c = params.residues
    G = (c / (1.0 - p * zi) + np.conj(c) / (1.0 - np.conj(p) * zi)).sum(axis=-1)
    zi = zi[..., 0]
    if pr is not None:
        G = G + params.real_res / (1.0 - pr * zi)
    if params.fir is not None:
        for j in range(params.fir.shape[1]):
            G = G + params.fir[:, j] * zi ** j
    return G


def layer_transfer_eval(params: LayerParams, z) -> np.ndarray:
    """Rational-branch transfer matrix ``A diag(G(z)) B`` (skip excluded).

    Scalar ``z`` gives ``[w, w]``; an array of ``z`` gives ``z.shape + (w, w)``.
    """
    G = latent_transfer(params, z)
    return (params.A_out * G[..., None, :]) @ params.B_in
