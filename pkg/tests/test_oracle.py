import math

import numpy as np
import pytest

from zno import oracle, zlayer
from zno.zlayer import layer_backward, layer_forward, new_layer, set_poles


def scalar_layer(K=2, pole=0.5, residue=1.0, F=0):
    store, params, _ = new_layer(1, 1, K, F, seed=None)
    params.B_in[...] = 1.0
    params.A_out[...] = 1.0
    params.res_re[...] = residue
    set_poles(params.pole_bank, [[pole]])
    return store, params


class TestGradcheck:
    def test_square(self):
        err = oracle.gradcheck(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.0]))
        assert err < 1e-9

    def test_central_difference_orders(self):
        f = lambda x: float(np.sin(x[0]))  # noqa: E731
        x = np.array([0.4])
        for order, step in [(2, 1e-5), (4, 1e-3), (6, 1e-2)]:
            assert oracle.central_difference(f, x, 0, step, order) == pytest.approx(math.cos(0.4), abs=1e-9)
        with pytest.raises(ValueError):
            oracle.central_difference(f, x, 0, 1e-3, 3)

    def test_does_not_mutate_point(self):
        x = np.array([1.0, 2.0])
        oracle.gradcheck(lambda v: float(v @ v), x, 2 * x)
        assert x.tolist() == [1.0, 2.0]

    def test_nonfinite(self):
        with pytest.raises(oracle.OracleError):
            oracle.gradcheck(lambda x: math.inf, np.zeros(1), np.zeros(1))

    def test_catches_wrong_gradient(self):
        assert oracle.gradcheck(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([-6.0])) > 1.0

    def test_layer(self):
        store, params, _ = new_layer(3, 2, 4, 2, seed=7)
        g = np.random.default_rng(7)
        h, G = g.normal(size=(2, 16, 3)), g.normal(size=(2, 16, 3))
        _, work = layer_forward(h, params)
        _, grads = layer_backward(work, G, params)
        analytic = np.concatenate([a.ravel() for a in grads.arrays().values()])
        assert analytic.size == store.size
        f = oracle.store_function(store, lambda: float(np.sum(layer_forward(h, params)[0] * G)))
        assert oracle.gradcheck(f, store.values, store_order(store, grads), step=1e-3, order=6) < 1e-6
        # a step of 1e-1 is far outside the stencil's accuracy range
        assert oracle.gradcheck(f, store.values, store_order(store, grads), step=1e-1) > 1e-6


def store_order(store, grads):
    """Gradient arrays laid out in the store's flat order."""
    out = np.zeros(store.size)
    arrays = grads.arrays()
    for name, seg in store.layout.items():
        out[seg.offset:seg.offset + seg.size] = arrays[name].ravel()
    return out


class TestImpulse:
    def test_length_half(self):
        # 2 * 0.5^n drops below 1e-16 from n = 55 on
        assert oracle.impulse_length([2.0], [0.5]) == 55
        assert 2 * 0.5 ** 54 >= oracle.TRUNC_TOL > 2 * 0.5 ** 55

    def test_zero_pole_fir_length(self):
        for F in (0, 3):
            _, params = scalar_layer(K=2, pole=0.0, F=F)
            if F:
                params.fir[...] = 0.1
            assert oracle.latent_impulse(params, 100).shape[1] == F + 1

    def test_no_residue(self):
        assert oracle.impulse_length([0.0], [0.9]) == 0

    def test_conv_matches_scan(self):
        g = np.random.default_rng(0)
        _, params, _ = new_layer(3, 2, 5, 2, seed=0)
        h = g.normal(size=(100, 3))
        out = oracle.conv_oracle(params, h)
        assert out.shape == (100, 3)
        assert np.abs(out - layer_forward(h[None], params)[0][0]).max() < 1e-10

    def test_poles_match(self):
        _, params, _ = new_layer(2, 3, 7, seed=1)
        p, pr = oracle.oracle_poles(params)
        q, qr = zlayer.constrain_poles(params.pole_bank)
        assert np.abs(p - q).max() < 1e-15 and np.abs(pr - qr).max() < 1e-15


class TestFft:
    def test_fast_decay(self):
        _, params = scalar_layer(pole=0.5 * np.exp(0.7j), residue=1.3)
        chk = oracle.fft_oracle(params, 1024)
        assert chk.tail_bound < 1e-100
        assert chk.max_err < 1e-10

    def test_slow_decay_bound(self):
        _, params = scalar_layer(pole=0.99 * np.exp(0.3j), residue=0.8)
        chk = oracle.fft_oracle(params, 1024)
        c = abs(complex(params.res_re[0, 0], params.res_im[0, 0]))
        # a conjugate pair contributes two geometric tails
        assert chk.tail_bound == pytest.approx(2 * c * 0.99 ** 1024 / (1 - 0.99), rel=1e-12)
        assert chk.passed

    def test_fir_only(self):
        _, params = scalar_layer(F=3, residue=0.0)
        params.fir[...] = [[0.5, -0.25, 0.125, 0.3]]
        chk = oracle.fft_oracle(params, 64)
        assert chk.tail_bound == 0.0
        assert chk.max_err < 1e-14

    def test_power_of_two(self):
        _, params = scalar_layer()
        with pytest.raises(ValueError):
            oracle.fft_oracle(params, 100)


class TestMutations:
    """A deliberately broken layer must be flagged by the oracles."""

    def test_wrong_sign_pole(self, monkeypatch):
        real = zlayer.constrain_poles
        monkeypatch.setattr(zlayer, "constrain_poles", lambda bank: (lambda p, pr: (-p, pr))(*real(bank)))
        _, params, _ = new_layer(3, 2, 4, 1, seed=2)
        h = np.random.default_rng(2).normal(size=(1, 64, 3))
        # conv_oracle rebuilds the poles itself; the DFT check shares the pole map
        assert np.abs(layer_forward(h, params)[0] - oracle.conv_oracle(params, h)).max() > 1e-3

    def test_wrong_sign_fir(self, monkeypatch):
        def bad(q, b, g):
            T = b.shape[1]
            for j in range(g.shape[1]):
                q[:, j:] -= g[:, j] * b[:, : T - j]

        monkeypatch.setattr(zlayer, "_fir_apply", bad)
        _, params, _ = new_layer(3, 2, 4, 2, seed=3)
        h = np.random.default_rng(3).normal(size=(1, 64, 3))
        assert np.abs(layer_forward(h, params)[0] - oracle.conv_oracle(params, h)).max() > 1e-4

    def test_wrong_sign_gradient(self, monkeypatch):
        real = zlayer._pole_jacobians

        def bad(bank):
            p, da, db, pr, dpr = real(bank)
            return p, -da, db, pr, dpr

        monkeypatch.setattr(zlayer, "_pole_jacobians", bad)
        store, params, _ = new_layer(2, 1, 2, 0, seed=4)
        g = np.random.default_rng(4)
        h, G = g.normal(size=(1, 12, 2)), g.normal(size=(1, 12, 2))
        _, work = layer_forward(h, params)
        _, grads = layer_backward(work, G, params)
        f = oracle.store_function(store, lambda: float(np.sum(layer_forward(h, params)[0] * G)))
        assert oracle.gradcheck(f, store.values, store_order(store, grads), step=1e-3, order=6) > 0.5


class TestTinyConfigs:
    def test_shape_limits(self):
        g = np.random.default_rng(0)
        for _ in range(20):
            c = oracle.random_tiny_config(g)
            assert c.w <= 4 and c.L == 2 and c.r == 2 and c.K in (2, 3) and c.F in (0, 2)

    @pytest.mark.parametrize("mode", ["z", "s-iso"])
    def test_objective(self, mode):
        cfg = oracle.random_tiny_config(np.random.default_rng(1), pole_mode=mode, backward_mode="recompute")
        assert oracle.objective_gradcheck(cfg, seed=1) < 1e-6
