"""Independent checks: finite-difference gradients, a truncated impulse-response
convolution, a DFT transfer-function comparison, and scalar-loop recursions for
the generators.

The convolution oracle never touches the layer's scan or pole map: poles are
rebuilt from the raw parameters with separate formulas. The DFT check runs the
scan on purpose and compares it with the closed-form transfer matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .zlayer import LayerParams, PoleMode, layer_forward, layer_transfer_eval

TRUNC_TOL = 1e-16


class OracleError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# finite differences


def central_difference(f, x, i: int, step: float, order: int = 2) -> float:
    """Central-difference derivative along coordinate ``i``.

    ``order`` 2 is the plain ``(f(x+h) - f(x-h)) / 2h``; orders 4 and 6 apply
    one or two Richardson steps on top of it (steps ``h``, ``2h``, ``4h``).
    """
    flat = x.ravel()
    orig = flat[i]

    def D(h):
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value while perturbing index {i}")
        return (fp - fm) / (2.0 * h)

    if order == 2:
        return D(step)
    d1, d2 = D(step), D(2 * step)
    r1 = (4.0 * d1 - d2) / 3.0
    if order == 4:
        return r1
    if order == 6:
        r2 = (4.0 * d2 - D(4 * step)) / 3.0
        return (16.0 * r1 - r2) / 15.0
    raise ValueError(f"order must be 2, 4 or 6, got {order!r}")


def gradcheck(f, x, analytic, step: float = 1e-6, indices=None, order: int = 2) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` at ``x``.

    ``f`` maps a float array shaped like ``x`` to a scalar. The per-entry error
    is ``|a - n| / max(|a|, |n|, 1e-12)``. ``indices`` restricts the check to
    a subset of flat positions.

    The two-point rule has a roundoff floor near ``eps |f| / h`` (about 1e-10
    for ``h = 1e-6``), so entries with gradients below ~1e-4 cannot reach a
    1e-6 relative error with it; ``order=6`` with ``step=4e-3`` lowers the
    floor to roughly 1e-13 absolute.
    """
    x = np.array(x, dtype=float)
    analytic = np.asarray(analytic, dtype=float).ravel()
    idx = range(x.size) if indices is None else np.asarray(indices).ravel()
    worst = 0.0
    for i in idx:
        num = central_difference(f, x, int(i), step, order)
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-12))
    return worst


def store_function(store, fn):
    """Adapt a closure over a ``ParamStore`` into ``f(x)`` for ``gradcheck``."""
    def f(x):
        saved = store.values.copy()
        store.values[:] = x
        try:
            return fn()
        finally:
            store.values[:] = saved
    return f


# ---------------------------------------------------------------------------
# poles, rebuilt from raw parameters


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _decay(a):
    """``log(1 + e^a)`` written without shared helpers."""
    a = np.asarray(a, dtype=float)
    return np.where(a > 0, a + np.log1p(np.exp(-np.abs(a))), np.log1p(np.exp(np.minimum(a, 0))))


def oracle_poles(params: LayerParams):
    """``(p[r, Kc], p_real[r] or None)`` computed from the stored parameters."""
    bank = params.pole_bank
    if bank.mode is PoleMode.ZPlane:
        rad = bank.rho_max * _sigmoid(bank.rho_tilde)
        radial = lambda a: bank.rho_max * _sigmoid(a)  # noqa: E731
    else:
        rad = np.exp(-_decay(bank.rho_tilde))
        radial = lambda a: np.exp(-_decay(a))  # noqa: E731
    p = rad * np.cos(bank.phi) + 1j * rad * np.sin(bank.phi)
    pr = None if bank.real_rho_tilde is None else radial(bank.real_rho_tilde)
    return p, pr


def impulse_length(residues, poles, tol: float = TRUNC_TOL, limit: int | None = None) -> int:
    """First ``n`` with ``max |c||p|^n < tol`` (``limit`` caps the search)."""
    mags = np.abs(np.ravel(residues))
    rad = np.abs(np.ravel(poles))
    keep = mags > 0
    mags, rad = mags[keep], rad[keep]
    if mags.size == 0:
        return 0
    if np.all(mags < tol):
        return 0
    n = 0
    cap = limit if limit is not None else 10 ** 7
    # closed-form start, then step to the exact crossing
    with np.errstate(divide="ignore"):
        est = np.where(rad > 0, np.log(tol / mags) / np.log(np.maximum(rad, 1e-300)), 1.0)
    n = max(int(np.floor(np.max(est))) - 2, 0)
    while n < cap and np.max(mags * rad ** n) >= tol:
        n += 1
    while n > 0 and np.max(mags * rad ** (n - 1)) < tol:
        n -= 1
    return min(n, cap)


def latent_impulse(params: LayerParams, T: int) -> np.ndarray:
    """Truncated latent impulse responses ``[r, N]`` with ``N <= T``."""
    p, pr = oracle_poles(params)
    c = params.res_re + 1j * params.res_im
    res_all = [c]
    pole_all = [p]
    if pr is not None:
        res_all.append(params.real_res)
        pole_all.append(pr)
    n_iir = impulse_length(np.concatenate([np.ravel(a) for a in res_all]),
                           np.concatenate([np.ravel(a) for a in pole_all]), limit=T)
    n_fir = 0 if params.fir is None else params.fir.shape[1]
    N = min(max(n_iir, n_fir), T)
    n = np.arange(N)
    r = p.shape[0]
    resp = np.zeros((r, N))
    if N == 0:
        return resp
    powers = p[:, :, None] ** n
    resp += 2.0 * np.real(c[:, :, None] * powers).sum(axis=1)
    if pr is not None:
        resp += params.real_res[:, None] * pr[:, None] ** n
    if n_fir:
        m = min(n_fir, N)
        resp[:, :m] += params.fir[:, :m]
    return resp


def conv_oracle(params: LayerParams, h: np.ndarray) -> np.ndarray:
    """Layer output (before the nonlinearity) by direct convolution.

    ``h`` is ``[T, w]`` or ``[B, T, w]``; the result has the same shape.
    """
    h = np.asarray(h, dtype=float)
    single = h.ndim == 2
    hb = h[None] if single else h
    B_, T, w = hb.shape
    resp = latent_impulse(params, T)
    r = resp.shape[0]
    out = np.empty_like(hb)
    for bi in range(B_):
        lat = np.einsum("aw,tw->ta", params.B_in, hb[bi])
        q = np.zeros((T, r))
        for a in range(r):
            if resp.shape[1]:
                q[:, a] = np.convolve(lat[:, a], resp[a])[:T]
        out[bi] = q @ params.A_out.T + hb[bi] @ params.W_skip.T + params.bias
    return out[0] if single else out


# ---------------------------------------------------------------------------
# frequency domain


@dataclass
class FftCheck:
    T: int
    max_err: float
    tail_bound: float
    atol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tail_bound + self.atol


def scan_impulse_response(params: LayerParams, T: int) -> np.ndarray:
    """MIMO impulse response ``[T, w, w]`` of the rational branch, read off the layer's own forward pass."""
    w = params.B_in.shape[1]
    h = np.zeros((w, T, w))
    h[np.arange(w), 0, np.arange(w)] = 1.0
    out, _ = layer_forward(h, params)
    out = out - params.bias
    out[:, 0, :] -= params.W_skip.T
    # out[j, n, i] = H[n][i, j]
    return out.transpose(1, 2, 0)


def tail_bound(params: LayerParams, T: int) -> float:
    """Bound on ``|sum_{n>=T} H[n] z^-n|`` entrywise, maximised over entries."""
    p, pr = oracle_poles(params)
    c = np.abs(params.res_re + 1j * params.res_im)
    rad = np.abs(p)
    per = (2.0 * c * rad ** T / (1.0 - rad)).sum(axis=1)
    if pr is not None:
        per = per + np.abs(params.real_res) * np.abs(pr) ** T / (1.0 - np.abs(pr))
    mix = np.abs(params.A_out) @ (per[:, None] * np.abs(params.B_in))
    return float(mix.max())


def fft_oracle(params: LayerParams, T: int, atol: float = 1e-10) -> FftCheck:
    """Compare the DFT of the scan's length-``T`` impulse response against the
    closed-form transfer matrix at ``z = exp(2 pi i m / T)``."""
    if T < 1 or T & (T - 1):
        raise ValueError(f"T must be a power of two, got {T}")
    p, pr = oracle_poles(params)
    pmax = max(np.abs(p).max(initial=0.0), 0.0 if pr is None else np.abs(pr).max())
    if pmax >= 1.0:
        raise ValueError("all poles must lie strictly inside the unit circle")
    H = scan_impulse_response(params, T)
    dft = np.fft.fft(H, axis=0)
    z = np.exp(2j * np.pi * np.arange(T) / T)
    exact = layer_transfer_eval(params, z)
    err = float(np.abs(dft - exact).max())
    return FftCheck(T, err, tail_bound(params, T), atol)


# ---------------------------------------------------------------------------
# generator recursions (scalar loops)


def arma_recursion(x, a1: float, a2: float, ma) -> np.ndarray:
    y = np.zeros(len(x))
    for n in range(len(x)):
        acc = 0.0
        for j, m in enumerate(ma):
            if n - j >= 0:
                acc += m * x[n - j]
        if n >= 1:
            acc += a1 * y[n - 1]
        if n >= 2:
            acc += a2 * y[n - 2]
        y[n] = acc
    return y


def biquad_recursion(x, sections) -> np.ndarray:
    y = np.asarray(x, dtype=float)
    for b0, b1, b2, a1, a2 in sections:
        out = np.zeros(len(y))
        for n in range(len(y)):
            v = b0 * y[n]
            if n >= 1:
                v += b1 * y[n - 1] + a1 * out[n - 1]
            if n >= 2:
                v += b2 * y[n - 2] + a2 * out[n - 2]
            out[n] = v
        y = out
    return y


def narx_recursion(x, a1: float, a2: float, gain: float) -> np.ndarray:
    y = np.zeros(len(x))
    for n in range(len(x)):
        y1 = y[n - 1] if n >= 1 else 0.0
        y2 = y[n - 2] if n >= 2 else 0.0
        xp = x[n - 1] if n >= 1 else 0.0
        y[n] = (a1 * y1 + a2 * y2
                + gain * (math.log1p(math.exp(x[n] + 0.5 * xp)) - math.log(2.0))
                + 0.08 * math.tanh(y1 * x[n]))
    return y


# ---------------------------------------------------------------------------
# whole-objective gradient check


def random_tiny_config(rng: np.random.Generator, pole_mode=PoleMode.ZPlane, backward_mode="save_history"):
    """Small random network shape for gradient checks (w <= 4, L = 2, r = 2)."""
    from .network import ZnoConfig
    return ZnoConfig(w=int(rng.integers(2, 5)), L=2, r=2, K=int(rng.choice([2, 3])),
                     F=int(rng.choice([0, 2])), d_u=int(rng.integers(1, 3)), d_y=1,
                     pole_mode=pole_mode, backward_mode=backward_mode)


def objective_gradcheck(config, seed: int = 0, T: int = 16, B: int = 2, loss_cfg=None,
                        step: float = 4e-3, order: int = 6, rho_push: bool = True) -> float:
    """Max relative error of the full training objective's gradient.

    With ``rho_push`` one pole per layer is moved above the safety radius so
    that the pole-safety term is active. Every radius is also kept at least
    0.01 away from ``rho_safe``: the squared hinge is only once differentiable
    there, which the higher-order stencils would misread.
    """
    from .network import ZnoModel
    from .objective import LossConfig, total_objective
    from .seqcore import TrajectoryBatch
    from .zlayer import constrain_poles, set_poles

    cfg = loss_cfg or LossConfig()
    g = np.random.default_rng(seed)
    model = ZnoModel(config, seed=seed)

    def away(rad):
        rad = np.array(rad, dtype=float)
        near = np.abs(rad - cfg.rho_safe) < 0.01
        rad[near] = np.where(rad[near] >= cfg.rho_safe, cfg.rho_safe + 0.01, cfg.rho_safe - 0.01)
        return rad

    for layer in model.layers:
        p, pr = constrain_poles(layer.pole_bank)
        rad = np.abs(p)
        if rho_push:
            rad.flat[0] = 0.97
        p = away(rad) * np.exp(1j * np.angle(p))
        if pr is not None:
            pr = away(np.full_like(pr, 0.96) if rho_push else pr)
        set_poles(layer.pole_bank, p, pr)
    batch = TrajectoryBatch(g.normal(size=(B, T, config.d_u)), g.normal(size=(B, T, config.d_y)))
    total_objective(model, batch, cfg)
    analytic = model.params.grads.copy()
    f = store_function(model.params, lambda: total_objective(model, batch, cfg, backward=False)[0])
    return gradcheck(f, model.params.values, analytic, step=step, order=order)
