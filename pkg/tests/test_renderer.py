import numpy as np
import pytest

from trigen import autodiff as ad
from trigen import renderer as rd
from trigen.autodiff import Tensor
from trigen.geometry import Rays


def _rays(n=1, length=1.0):
    o = np.zeros((n, 3))
    d = np.tile([0.0, 0.0, -1.0], (n, 1))
    return Rays(Tensor(o), Tensor(d), 0.0, length)


class TestStratified:
    def test_two_bins_midpoints(self):
        s = rd.sample_stratified(_rays(), 2)
        np.testing.assert_allclose(s.t[0], [0.25, 0.75])
        np.testing.assert_allclose(s.deltas[0], [0.5, 0.5])

    def test_depths_strictly_increasing_all_seeds(self):
        for seed in range(20):
            s = rd.sample_stratified(_rays(4), 16, jitter=True, rng=seed)
            assert (np.diff(s.t, axis=1) > 0).all()

    def test_jitter_stays_within_bins(self):
        n = 16
        s = rd.sample_stratified(_rays(8), n, jitter=True, rng=3)
        h = 1.0 / n
        edges = np.arange(n) * h
        assert (s.t >= edges[None, :]).all()
        assert (s.t <= edges[None, :] + h).all()

    def test_minimum_count_enforced(self):
        with pytest.raises(ValueError):
            rd.sample_stratified(_rays(), 1)

    def test_last_interval_cap(self):
        s = rd.sample_stratified(_rays(2, length=2.0), 8, jitter=True, rng=0)
        np.testing.assert_allclose(s.deltas[:, -1], 2.0 / 8)


class TestVolumeRender:
    def test_zero_density_renders_black(self):
        s = rd.sample_stratified(_rays(), 32)
        out = rd.volume_render(Tensor(np.zeros((1, 32))),
                               Tensor(np.full((1, 32, 3), 0.8)), s)
        np.testing.assert_array_equal(out.color.data, np.zeros((1, 3)))
        np.testing.assert_array_equal(out.opacity.data, np.zeros(1))

    def test_saturated_first_sample_returns_its_color(self):
        s = rd.sample_stratified(_rays(), 16)
        sig = np.zeros((1, 16))
        sig[0, 0] = 1e3 / s.deltas[0, 0]
        col = np.full((1, 16, 3), 0.0)
        col[0, 0] = [0.2, 0.5, 0.9]
        out = rd.volume_render(Tensor(sig), Tensor(col), s)
        np.testing.assert_allclose(out.color.data[0], [0.2, 0.5, 0.9], atol=1e-6)
        assert out.opacity.data[0] == pytest.approx(1.0, abs=1e-6)

    def test_constant_slab_matches_closed_form(self):
        s = rd.sample_stratified(_rays(), 256)
        out = rd.volume_render(Tensor(np.full((1, 256), 2.0)),
                               Tensor(np.full((1, 256, 3), 0.6)), s)
        expected = 1.0 - np.exp(-2.0)
        assert out.opacity.data[0] == pytest.approx(expected, abs=1e-3)
        np.testing.assert_allclose(out.color.data[0], 0.6 * expected, atol=1e-3)

    def test_weights_nonnegative_and_sum_below_one(self):
        rng = np.random.default_rng(0)
        s = rd.sample_stratified(_rays(32), 24, jitter=True, rng=1)
        sig = rng.uniform(0, 20, size=(32, 24))
        col = rng.uniform(0, 1, size=(32, 24, 3))
        out = rd.volume_render(Tensor(sig), Tensor(col), s)
        w = out.weights.data
        assert (w >= 0).all()
        assert (w.sum(axis=1) <= 1.0 + 1e-9).all()
        np.testing.assert_allclose(w.sum(axis=1), out.opacity.data, atol=1e-12)

    def test_negative_density_rejected(self):
        s = rd.sample_stratified(_rays(), 4)
        with pytest.raises(ValueError, match="negative density"):
            rd.volume_render(Tensor(np.full((1, 4), -0.1)),
                             Tensor(np.zeros((1, 4, 3))), s)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        s = rd.sample_stratified(_rays(2), 12)
        col = rng.uniform(0, 1, size=(2, 12, 3))
        err = ad.grad_check(
            lambda x: ad.tsum(rd.volume_render(ad.softplus(x), Tensor(col), s).color),
            Tensor(rng.normal(size=(2, 12))))
        assert err < 1e-6


class TestLosses:
    def test_identical_inputs_zero(self):
        x = Tensor(np.random.default_rng(0).random((7, 3)))
        assert rd.render_loss(x, x).data == 0.0

    def test_uniform_offset(self):
        a = Tensor(np.full((5, 3), 0.5))
        b = Tensor(np.full((5, 3), 0.6))
        assert rd.render_loss(a, b).data == pytest.approx(0.01)

    def test_gradient_is_normalized_residual(self):
        rng = np.random.default_rng(1)
        pred = rng.random((4, 3))
        gt = rng.random((4, 3))
        with ad.Tape() as tape:
            p = tape.watch(Tensor(pred))
            tape.backward(rd.render_loss(p, Tensor(gt)))
        np.testing.assert_allclose(tape.grad(p), 2.0 * (pred - gt) / pred.size, atol=1e-14)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            rd.render_loss(Tensor(np.zeros((3, 3))), Tensor(np.zeros((4, 3))))

    def test_tv_constant_plane_is_zero(self):
        assert rd.tv_loss([Tensor(np.full((2, 4, 4), 3.0))], 1.0).data == 0.0

    def test_tv_single_difference(self):
        assert rd.tv_loss([Tensor(np.array([[[0.0, 1.0]]]))], 1.0).data == pytest.approx(1.0)

    def test_tv_quadratic_homogeneity(self):
        p = np.random.default_rng(2).normal(size=(2, 5, 5))
        l1 = rd.tv_loss([Tensor(p)], 1.0).data
        l2 = rd.tv_loss([Tensor(2.0 * p)], 1.0).data
        assert l2 / l1 == pytest.approx(4.0)

    def test_tv_weight_scaling(self):
        p = np.random.default_rng(3).normal(size=(1, 4, 4))
        assert rd.tv_loss([Tensor(p)], 0.5).data == pytest.approx(
            0.5 * float(rd.tv_loss([Tensor(p)], 1.0).data))


class TestImportance:
    def test_merged_depths_sorted_with_positive_deltas(self):
        rng = np.random.default_rng(4)
        s = rd.sample_stratified(_rays(6), 16, jitter=True, rng=5)
        w = rng.uniform(0, 1, size=(6, 16))
        s2 = rd.sample_importance(s, w, 16, rng=6)
        assert s2.t.shape == (6, 32)
        assert (np.diff(s2.t, axis=1) >= 0).all()
        assert (s2.deltas > 0).all()

    def test_concentrates_samples_in_heavy_bins(self):
        s = rd.sample_stratified(_rays(1), 16)
        w = np.zeros((1, 16))
        w[0, 8] = 1.0  # all the mass in bin 8
        s2 = rd.sample_importance(s, w, 64, rng=7)
        lo, hi = s.t[0, 7], s.t[0, 9]
        frac = ((s2.t[0] > lo) & (s2.t[0] < hi)).mean()
        assert frac > 0.7
