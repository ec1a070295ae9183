import numpy as np
import pytest

from trigen import autodiff as ad
from trigen.autodiff import ShapeError, Tape, Tensor
from trigen.nnops import conv2d, grid_sample_bilinear, upsample_bilinear2d


class TestConv2d:
    def test_ones_input_ones_kernel_padding1(self):
        y = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert y.data[0, 1, 1] == 9.0
        assert y.data[0, 0, 0] == 4.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 6))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = 1.0
        k[1, 1, 1, 1] = 1.0
        y = conv2d(Tensor(x), Tensor(k), padding=1)
        np.testing.assert_allclose(y.data, x, atol=1e-14)

    def test_cross_correlation_orientation(self):
        # an off-center tap reads the input shifted the opposite way
        x = np.zeros((1, 3, 3))
        x[0, 1, 2] = 1.0
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 2] = 1.0  # tap at (dy=0, dx=+1)
        y = conv2d(Tensor(x), Tensor(k), padding=1)
        assert y.data[0, 1, 1] == 1.0

    def test_channel_mismatch_error(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), padding=1)

    @pytest.mark.parametrize("padding,shape,kshape", [
        (1, (2, 4, 5), (3, 2, 3, 3)),
        (0, (2, 5, 5), (1, 2, 3, 3)),
        (2, (1, 4, 4), (2, 1, 5, 5)),
    ])
    def test_gradients_vs_finite_differences(self, padding, shape, kshape):
        rng = np.random.default_rng(42)
        x = rng.normal(size=shape)
        k = rng.normal(size=kshape)
        ex = ad.grad_check(
            lambda t: ad.tsum(ad.sin(conv2d(t, Tensor(k), padding=padding))), Tensor(x))
        ek = ad.grad_check(
            lambda t: ad.tsum(ad.sin(conv2d(Tensor(x), t, padding=padding))), Tensor(k))
        assert ex < 1e-6 and ek < 1e-6


class TestUpsample:
    def test_constant_stays_constant(self):
        y = upsample_bilinear2d(Tensor(np.full((3, 4, 5), 7.0)), 2)
        assert y.shape == (3, 8, 10)
        np.testing.assert_allclose(y.data, 7.0)

    def test_two_sample_row_convention(self):
        # align_corners=False: src = (o + 0.5)/2 - 0.5, clamped
        y = upsample_bilinear2d(Tensor(np.array([[[0.0, 1.0]]])), 2)
        np.testing.assert_allclose(y.data[0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4))
        err = ad.grad_check(lambda t: ad.tsum(ad.sin(upsample_bilinear2d(t, 2))), Tensor(x))
        assert err < 1e-6


class TestGridSample:
    def test_grid_node_exact(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(3, 4, 5))
        # u=v=-1 is node (0, 0); u=+1, v=-1 is (0, last column)
        f = grid_sample_bilinear(Tensor(p), Tensor([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0]]))
        np.testing.assert_allclose(f.data[0], p[:, 0, 0], atol=1e-14)
        np.testing.assert_allclose(f.data[1], p[:, 0, -1], atol=1e-14)
        np.testing.assert_allclose(f.data[2], p[:, -1, -1], atol=1e-14)

    def test_cell_center_average(self):
        p = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        f = grid_sample_bilinear(p, Tensor([[0.0, 0.0]]))
        assert f.data[0, 0] == pytest.approx(1.5)

    def test_border_clamp(self):
        p = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        f = grid_sample_bilinear(p, Tensor([[5.0, -9.0], [-2.0, 2.0]]))
        np.testing.assert_allclose(f.data.ravel(), [1.0, 2.0])

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=(4, 6, 5))
        uv = rng.uniform(-0.95, 0.95, size=(9, 2))
        ep = ad.grad_check(
            lambda t: ad.tsum(ad.sin(grid_sample_bilinear(t, Tensor(uv)))), Tensor(p))
        eu = ad.grad_check(
            lambda t: ad.tsum(ad.sin(grid_sample_bilinear(Tensor(p), t))), Tensor(uv))
        assert ep < 1e-6 and eu < 1e-6

    def test_single_query_touches_at_most_4_cells_per_channel(self):
        rng = np.random.default_rng(4)
        p = rng.normal(size=(5, 8, 8))
        with Tape() as tape:
            pt = tape.watch(Tensor(p))
            out = ad.tsum(grid_sample_bilinear(pt, Tensor([[0.23, -0.57]])))
            tape.backward(out)
        g = tape.grad(pt)
        for c in range(5):
            assert (np.abs(g[c]) > 0).sum() <= 4

    def test_out_of_range_uv_gradient_is_zero(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(2, 4, 4))
        with Tape() as tape:
            uv = tape.watch(Tensor([[1.7, 0.1], [0.1, -1.3]]))
            tape.backward(ad.tsum(grid_sample_bilinear(Tensor(p), uv)))
        g = tape.grad(uv)
        assert g[0, 0] == 0.0 and g[1, 1] == 0.0
        assert g[0, 1] != 0.0 and g[1, 0] != 0.0

    def test_numba_and_numpy_paths_agree(self, monkeypatch):
        from trigen import _kernels
        rng = np.random.default_rng(6)
        p = rng.normal(size=(3, 5, 7))
        uv = rng.uniform(-1.2, 1.2, size=(11, 2))

        def run():
            with Tape() as tape:
                pt = tape.watch(Tensor(p))
                ut = tape.watch(Tensor(uv))
                out = grid_sample_bilinear(pt, ut)
                tape.backward(ad.tsum(ad.sin(out)))
                return out.data, tape.grad(pt), tape.grad(ut)

        ref = run()
        monkeypatch.setattr(_kernels, "_HAVE_NUMBA", False)
        alt = run()
        for a, b in zip(ref, alt):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
