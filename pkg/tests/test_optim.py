import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from zno.optim import Adam, DivergenceError, OptimConfig, adam_step, clip_grad_norm, scheduled_lr
from zno.seqcore import ConfigError, ParamStore


def store(values, grads=None):
    ps = ParamStore([("x", (len(values),))])
    ps.values[:] = values
    if grads is not None:
        ps.grads[:] = grads
    return ps


class TestAdam:
    def test_first_step_moves_by_lr(self):
        ps = store([0.5, -2.0], [1.0, 1.0])
        cfg = OptimConfig(lr=1e-3, weight_decay=0.0)
        adam_step(ps, Adam(ps, cfg), cfg, 0)
        assert_allclose(ps.values, [0.5 - 1e-3, -2.0 - 1e-3], atol=1e-10)

    def test_zero_grad_no_decay(self):
        ps = store([0.3, 0.7], [0.0, 0.0])
        cfg = OptimConfig(weight_decay=0.0)
        opt = Adam(ps, cfg)
        for e in range(3):
            opt.step(e)
        assert_array_equal(ps.values, [0.3, 0.7])

    def test_coupled_weight_decay(self):
        ps = store([1.0], [0.0])
        cfg = OptimConfig(lr=1e-3, weight_decay=1e-4)
        Adam(ps, cfg).step(0)
        # the decay term enters the gradient, so the first step is lr * g / (|g| + eps)
        assert ps.values[0] == pytest.approx(1.0 - 1e-3 * 1e-4 / (1e-4 + 1e-8), abs=1e-15)

    def test_decoupled_weight_decay(self):
        ps = store([1.0], [0.0])
        cfg = OptimConfig(lr=1e-3, weight_decay=1e-2, decoupled_wd=True)
        Adam(ps, cfg).step(0)
        assert ps.values[0] == pytest.approx(1.0 - 1e-5, abs=1e-15)

    def test_nan_gradient(self):
        ps = store([1.0, 2.0], [0.1, np.nan])
        with pytest.raises(DivergenceError):
            Adam(ps, OptimConfig()).step(0)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            g = np.random.default_rng(7)
            ps = store(g.normal(size=5))
            opt = Adam(ps, OptimConfig())
            for e in range(20):
                ps.grads[:] = g.normal(size=5)
                opt.step(e)
            runs.append(ps.values.copy())
        assert_array_equal(*runs)

    def test_foreign_state(self):
        a, b = store([1.0]), store([1.0])
        cfg = OptimConfig()
        with pytest.raises(ConfigError):
            adam_step(a, Adam(b, cfg), cfg, 0)


class TestSchedule:
    def test_step_decay(self):
        cfg = OptimConfig(lr=2e-3, step_size=100, gamma=0.5)
        assert scheduled_lr(cfg, 250) == pytest.approx(5e-4, rel=1e-15)

    def test_piecewise_constant(self):
        cfg = OptimConfig(lr=2e-3, step_size=100, gamma=0.5)
        assert scheduled_lr(cfg, 0) == scheduled_lr(cfg, 99) == 2e-3
        assert scheduled_lr(cfg, 100) == scheduled_lr(cfg, 199) == 1e-3

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(gamma=1.5), dict(clip_norm=0.0), dict(step_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            OptimConfig(**kw)


class TestClip:
    def test_scales_down(self):
        ps = store([0.0, 0.0], [1.2, 1.6])
        assert clip_grad_norm(ps, 0.5) == pytest.approx(2.0)
        assert_allclose(ps.grads, [0.3, 0.4], rtol=1e-15)

    def test_below_threshold(self):
        ps = store([0.0, 0.0], [0.18, 0.24])
        clip_grad_norm(ps, 0.5)
        assert_array_equal(ps.grads, [0.18, 0.24])

    def test_post_norm_bound(self):
        g = np.random.default_rng(0)
        for _ in range(50):
            ps = store(np.zeros(20), g.normal(scale=g.uniform(0.01, 100), size=20))
            m = g.uniform(0.01, 5)
            clip_grad_norm(ps, m)
            assert np.linalg.norm(ps.grads) <= m + 1e-12
