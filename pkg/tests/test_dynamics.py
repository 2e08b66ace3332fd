import math

import numpy as np
import pytest

from gsdyn.dynamics import SpatioTemporalAttention, attention_spatiotemporal, dynamics_reg_loss, fuse_temporal, outlier_mask
from gsdyn.engine import Tape, Tensor, backward, finite_diff_check, parameter, precision
from gsdyn.engine import tensor as T

import oracles

HAND = np.array([[0.0], [0.0], [10.0]])


@pytest.fixture(autouse=True)
def _f64():
    with precision(64):
        yield


class TestFuse:
    def test_concatenation_order(self):
        out = fuse_temporal(Tensor([1.0, 2.0]), Tensor([3.0, 4.0, 5.0]))
        np.testing.assert_array_equal(out.data, [1, 2, 3, 4, 5])

    def test_zero_attribute(self):
        out = fuse_temporal(Tensor(np.zeros((4, 2))), Tensor(np.ones((4, 3))))
        assert not out.data[:, :2].any()

    def test_adjoint_is_leading_slots(self):
        d, h = parameter(np.ones((2, 2))), parameter(np.ones((2, 3)))
        up = np.arange(10.0).reshape(2, 5)
        with Tape() as tape:
            loss = T.sum_(T.mul(fuse_temporal(d, h), up))
        g = backward(tape, loss)
        np.testing.assert_array_equal(g[d], up[:, :2])
        np.testing.assert_array_equal(g[h], up[:, 2:])


class TestSpatioTemporal:
    def test_unit_projection(self):
        h_s = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(attention_spatiotemporal(Tensor(np.ones((3, 4))), Tensor(h_s)).data, h_s)

    def test_zero_spatial(self):
        att = SpatioTemporalAttention(7, 4, np.random.default_rng(0))
        out = att(Tensor(np.random.default_rng(1).normal(size=(3, 7))), Tensor(np.zeros((3, 4))))
        assert not out.data.any()

    def test_elementwise_with_projection(self):
        rng = np.random.default_rng(2)
        att = SpatioTemporalAttention(7, 4, rng)
        x, h_s = rng.normal(size=(3, 7)), rng.normal(size=(3, 4))
        want = (x @ att.proj.weight.data + att.proj.bias.data) * h_s
        np.testing.assert_allclose(att(Tensor(x), Tensor(h_s)).data, want, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="projected width"):
            attention_spatiotemporal(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 4))
        pt = [rng.normal(size=(2, 4)), rng.normal(size=(2, 4))]
        assert finite_diff_check(lambda a, b: T.sum_(T.mul(attention_spatiotemporal(a, b), w)), pt) < 1e-4


class TestOutlierMask:
    def test_identical_attributes(self):
        stats, mask = outlier_mask(np.ones((5, 3)))
        assert stats.sigma_dist == 0 and stats.mu_dist == 0
        assert not mask.any()

    def test_hand_example(self):
        stats, mask = outlier_mask(HAND)
        np.testing.assert_allclose(stats.d_bar, [10 / 3], atol=1e-15)
        np.testing.assert_allclose(stats.dist, [10 / 3, 10 / 3, 20 / 3], atol=1e-14)
        assert stats.mu_dist == pytest.approx(40 / 9, abs=1e-14)
        assert stats.sigma_dist == pytest.approx(math.sqrt(2) * 10 / 9, abs=1e-14)
        assert mask.tolist() == [False, False, True]

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_oracle(self, seed):
        a = np.random.default_rng(seed).normal(size=(50, 4)) * [1, 2, 3, 0.5]
        stats, mask = outlier_mask(a)
        d_bar, dist, mu, sigma, want = oracles.outlier_oracle(a)
        np.testing.assert_allclose(stats.dist, dist, atol=1e-12)
        assert stats.mu_dist == pytest.approx(mu, abs=1e-12)
        assert stats.sigma_dist == pytest.approx(sigma, abs=1e-12)
        assert mask.tolist() == want.tolist()

    def test_mask_rate_standard_normal(self):
        """Rate on one draw against an oracle estimate pooled over independent draws."""
        rate = outlier_mask(np.random.default_rng(0).normal(size=(10_000, 8)))[1].mean()
        pooled = np.mean([oracles.outlier_oracle(np.random.default_rng(s).normal(size=(2_000, 8)))[4].mean() for s in range(100, 105)])
        assert abs(rate - pooled) <= 0.03

    @pytest.mark.parametrize("seed", range(10))
    def test_translation_and_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(30, 8)) ** 3
        base = outlier_mask(a)[1]
        assert outlier_mask(a + rng.normal(size=8) * 5)[1].tolist() == base.tolist()
        assert outlier_mask(a * rng.uniform(0.1, 10))[1].tolist() == base.tolist()

    def test_accepts_tensor(self):
        assert outlier_mask(Tensor(HAND))[1].tolist() == [False, False, True]

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            outlier_mask(np.zeros((0, 3)))


class TestRegLoss:
    def test_hand_example(self):
        d = parameter(HAND)
        stats, mask = outlier_mask(d)
        assert dynamics_reg_loss(d, stats, mask).item() == pytest.approx(400 / 27, abs=1e-12)

    def test_empty_mask(self):
        d = parameter(np.random.default_rng(0).normal(size=(5, 2)))
        stats, _ = outlier_mask(d)
        with Tape() as tape:
            loss = dynamics_reg_loss(d, stats, np.zeros(5, dtype=bool))
        assert loss.item() == 0.0
        assert not backward(tape, loss)[d].any()

    def test_quadratic_in_distance(self):
        stats, _ = outlier_mask(HAND)
        mask = np.array([False, False, True])
        one = dynamics_reg_loss(Tensor(HAND), stats, mask).item()
        far = HAND.copy()
        far[2] = stats.d_bar + 2 * (HAND[2] - stats.d_bar)
        assert dynamics_reg_loss(Tensor(far), stats, mask).item() == pytest.approx(4 * one)

    def test_gradient_only_on_masked_rows(self):
        a = np.random.default_rng(1).normal(size=(40, 8))
        d = parameter(a)
        stats, mask = outlier_mask(d)
        with Tape() as tape:
            loss = dynamics_reg_loss(d, stats, mask)
        g = backward(tape, loss)[d]
        assert not g[~mask].any()
        np.testing.assert_allclose(g[mask], 2 * (a[mask] - stats.d_bar) / 40, atol=1e-15)

    def test_statistics_are_constants(self):
        d = parameter(HAND)
        stats, mask = outlier_mask(d)
        assert isinstance(stats.d_bar, np.ndarray) and isinstance(stats.mu_dist, float)
        with Tape() as tape:
            dynamics_reg_loss(d, stats, mask)
        mean_inputs = [x for node in tape.nodes for x in node.inputs if x.shape == (1,) and np.array_equal(x.data, stats.d_bar)]
        assert mean_inputs and not any(x.requires_grad for x in mean_inputs)

    def test_gradient_matches_finite_difference(self):
        a = np.random.default_rng(2).normal(size=(12, 3))
        stats, mask = outlier_mask(a)
        assert finite_diff_check(lambda x: dynamics_reg_loss(x, stats, mask), a) < 1e-4
