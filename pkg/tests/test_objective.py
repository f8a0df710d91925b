import numpy as np
import pytest
from numpy.testing import assert_allclose

from zno.network import ZnoConfig, ZnoModel
from zno.objective import (LossConfig, ZeroTargetError, pole_safety, rel_l2, rel_l2_with_grad,
                           suffix_loss, suffix_loss_with_grad, suffix_start, total_objective)
from zno.seqcore import ConfigError, TrajectoryBatch
from zno.zlayer import set_poles

rng = np.random.default_rng(42)
TARGET = rng.normal(size=(3, 8, 2))


def model_with_radius(radius, L=1, r=1, K=2):
    m = ZnoModel(ZnoConfig(w=2, L=L, r=r, K=K), seed=0)
    for layer in m.layers:
        bank = layer.pole_bank
        set_poles(bank, np.full(bank.rho_tilde.shape, radius * np.exp(0.3j)),
                  None if bank.real_rho_tilde is None else np.full(bank.real_rho_tilde.shape, radius))
    return m


class TestRelL2:
    def test_exact(self):
        assert rel_l2(TARGET, TARGET) == 0.0

    def test_zero_prediction(self):
        assert rel_l2(np.zeros_like(TARGET), TARGET) == pytest.approx(1.0, abs=1e-15)

    def test_double(self):
        assert rel_l2(2 * TARGET, TARGET) == pytest.approx(1.0, abs=1e-15)

    def test_scale_invariance(self):
        pred = rng.normal(size=TARGET.shape)
        for alpha in (-3.0, 0.5, 1e3):
            assert rel_l2(alpha * pred, alpha * TARGET) == pytest.approx(rel_l2(pred, TARGET), rel=1e-14)

    def test_zero_target(self):
        t = TARGET.copy()
        t[1] = 0.0
        with pytest.raises(ZeroTargetError):
            rel_l2(TARGET, t)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            rel_l2(TARGET[:, :4], TARGET)

    def test_gradient(self):
        pred = rng.normal(size=TARGET.shape)
        _, g = rel_l2_with_grad(pred, TARGET)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 3, 1), (2, 7, 0)]:
            e = np.zeros_like(pred)
            e[idx] = h
            num = (rel_l2(pred + e, TARGET) - rel_l2(pred - e, TARGET)) / (2 * h)
            assert g[idx] == pytest.approx(num, rel=1e-6)

    def test_gradient_zero_at_exact(self):
        _, g = rel_l2_with_grad(TARGET, TARGET)
        assert not g.any()


class TestSuffix:
    def test_window_starts(self):
        assert suffix_start(8) == 2
        assert suffix_start(2048) == 512

    def test_short_sequence(self):
        with pytest.raises(ConfigError):
            suffix_start(3)

    def test_prefix_ignored(self):
        pred = TARGET.copy()
        pred[:, :2] += 10.0
        assert suffix_loss(pred, TARGET, 8) == 0.0

    def test_prefix_gradient_zero(self):
        _, g = suffix_loss_with_grad(rng.normal(size=TARGET.shape), TARGET)
        assert not g[:, :2].any()
        assert g[:, 2:].any()

    def test_length_must_match(self):
        with pytest.raises(ConfigError):
            suffix_loss(TARGET, TARGET, 16)


class TestPoleSafety:
    def test_inactive(self):
        assert pole_safety(model_with_radius(0.95 - 1e-9)) == 0.0

    def test_single_pole(self):
        m = model_with_radius(0.97, L=1, r=1, K=1)
        assert pole_safety(m, 0.95) == pytest.approx(4e-4, rel=1e-10)

    def test_pair_counts_twice(self):
        # two slots per pair, normalised by L r K
        m = model_with_radius(0.97, L=1, r=1, K=2)
        assert pole_safety(m, 0.95) == pytest.approx(4e-4, rel=1e-10)

    def test_ceiling(self):
        m = model_with_radius(0.999 - 1e-13, L=2, r=2, K=3)
        assert pole_safety(m, 0.95) == pytest.approx(2.401e-3, rel=1e-8)

    def test_positive_iff_outside(self):
        assert pole_safety(model_with_radius(0.9501)) > 0

    def test_gradient_accumulates(self):
        m = model_with_radius(0.97, K=3)
        m.zero_grad()
        pole_safety(m, 0.95, accumulate_scale=1.0)
        g = m.layer_grads[0].pole_bank
        assert np.all(g.rho_tilde > 0) and np.all(g.real_rho_tilde > 0)
        assert not g.phi.any()


class TestTotal:
    def _batch(self):
        return TrajectoryBatch(rng.normal(size=(2, 16, 1)), rng.normal(size=(2, 16, 1)))

    def test_plain_is_rel_l2(self):
        m = model_with_radius(0.98)
        batch = self._batch()
        loss, terms = total_objective(m, batch, LossConfig.plain())
        assert loss == rel_l2(m.predict(batch.inputs), batch.targets)
        assert set(terms) == {"rel_l2"}

    def test_weighted_sum(self):
        m = model_with_radius(0.98)
        cfg = LossConfig(lambda_pole=0.5, lambda_suf=0.25)
        loss, t = total_objective(m, self._batch(), cfg)
        assert loss == pytest.approx(t["rel_l2"] + 0.25 * t["suffix"] + 0.5 * t["pole"], rel=1e-14)

    def test_perfect_prediction(self):
        m = model_with_radius(0.9)
        u = rng.normal(size=(2, 16, 1))
        batch = TrajectoryBatch(u, m.predict(u))
        loss, _ = total_objective(m, batch, LossConfig())
        assert loss == 0.0

    def test_grads_zeroed_first(self):
        m = model_with_radius(0.98)
        batch = self._batch()
        total_objective(m, batch, LossConfig())
        first = m.params.grads.copy()
        total_objective(m, batch, LossConfig())
        assert_allclose(m.params.grads, first, rtol=0, atol=0)

    def test_rho_safe_range(self):
        with pytest.raises(ConfigError):
            LossConfig(rho_safe=0.9995)
