import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from lhsp.imaging import (
    ImageError,
    classical_upscale,
    cubic_kernel,
    degrade,
    gaussian_blur,
    linear_kernel,
    load_image,
    rgb_to_luma,
    rgb_to_ycbcr,
    save_image,
    sobel_gradients,
    ycbcr_to_rgb,
)
from oracles import cubic_weight, naive_resize


def smooth_image(h=48, w=48, seed=0):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    rng = np.random.default_rng(seed)
    img = np.zeros((h, w))
    for _ in range(4):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(8, 14)
        img += rng.uniform(0.1, 0.3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img + 0.1


class TestColour:
    def test_gray_is_achromatic(self):
        ycc = rgb_to_ycbcr(np.array([128, 128, 128]) / 255.0)
        assert ycc[0] == pytest.approx(128 / 255, abs=1e-12)
        assert ycc[1] == pytest.approx(0.5, abs=1e-12)
        assert ycc[2] == pytest.approx(0.5, abs=1e-12)

    def test_white(self):
        assert rgb_to_ycbcr(np.ones(3))[0] == pytest.approx(1.0, abs=1e-12)

    def test_black(self):
        np.testing.assert_allclose(rgb_to_ycbcr(np.zeros(3)), [0.0, 0.5, 0.5], atol=1e-15)

    def test_red_row(self):
        assert rgb_to_ycbcr(np.array([1.0, 0.0, 0.0]))[0] == pytest.approx(0.299, abs=1e-15)

    def test_inverse(self):
        rgb = np.random.default_rng(3).uniform(size=(1000, 3))
        np.testing.assert_allclose(ycbcr_to_rgb(rgb_to_ycbcr(rgb)), rgb, atol=1e-12, rtol=0)
        # and against an independent inverse of the same matrix
        m = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
        ycc = rgb_to_ycbcr(rgb)
        np.testing.assert_allclose(
            np.linalg.solve(m, (ycc - [0, 0.5, 0.5]).T).T, rgb, atol=1e-12, rtol=0
        )

    def test_studio_luma_range(self):
        assert rgb_to_luma(np.zeros(3), "studio") == pytest.approx(16 / 255)
        assert rgb_to_luma(np.ones(3), "studio") == pytest.approx(235 / 255)


class TestIO:
    def test_gray_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(13, 17), dtype=np.uint8)
        src = tmp_path / "a.png"
        Image.fromarray(arr).save(src)
        img = load_image(src)
        assert not img.is_color
        for ext in ("png", "pgm"):
            out = tmp_path / f"b.{ext}"
            save_image(out, img.y)
            np.testing.assert_array_equal(np.asarray(Image.open(out)), arr)

    def test_rgb_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
        src = tmp_path / "c.png"
        Image.fromarray(arr).save(src)
        img = load_image(src)
        assert img.is_color
        out = tmp_path / "d.png"
        save_image(out, img.y, img.cb, img.cr)
        np.testing.assert_array_equal(np.asarray(Image.open(out)), arr)

    def test_gray_rgb_loads_as_y(self, tmp_path):
        src = tmp_path / "g.png"
        Image.fromarray(np.full((4, 4, 3), 128, np.uint8)).save(src)
        img = load_image(src)
        np.testing.assert_allclose(img.y, 128 / 255, atol=1e-12)
        np.testing.assert_allclose(img.cb, 0.5, atol=1e-12)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageError, match="nope.png"):
            load_image(tmp_path / "nope.png")

    def test_sixteen_bit_rejected(self, tmp_path):
        src = tmp_path / "deep.png"
        Image.fromarray(np.zeros((4, 4), np.uint16)).save(src)
        with pytest.raises(ImageError, match="deep.png"):
            load_image(src)

    def test_no_partial_file_on_bad_format(self, tmp_path):
        with pytest.raises(ImageError):
            save_image(tmp_path / "x.bmpx", np.zeros((2, 2)))
        assert list(tmp_path.iterdir()) == []


class TestKernels:
    def test_cubic_matches_scalar(self):
        t = np.linspace(-2.5, 2.5, 101)
        np.testing.assert_allclose(cubic_kernel(t), [cubic_weight(v) for v in t], atol=1e-15)

    def test_partition_of_unity(self):
        for phase in np.linspace(0, 1, 11):
            taps = phase - np.arange(-2, 3)
            assert cubic_kernel(taps).sum() == pytest.approx(1.0, abs=1e-12)
            assert linear_kernel(taps).sum() == pytest.approx(1.0, abs=1e-12)


class TestDegrade:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    @pytest.mark.parametrize("sigma", [0.0, 1.2])
    def test_constant(self, scale, sigma):
        out = degrade(np.full((24, 24), 0.37), scale, sigma)
        assert out.shape == (24 // scale, 24 // scale)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_crops_to_multiple(self):
        assert degrade(np.zeros((25, 31)), 3).shape == (8, 10)

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_impulse_matches_direct_sum(self, scale):
        hr = np.zeros((12 * scale // 2 * 2, 10 * scale // 2 * 2))
        hr[7, 5] = 1.0
        hr[2, 9] = 0.5
        out = degrade(hr, scale)
        ref = naive_resize(hr, 1.0 / scale, cubic_weight, 2.0)
        np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)

    def test_two_halvings_equal_quarter(self):
        hr = smooth_image(96, 96)
        twice = degrade(degrade(hr, 2), 2)
        once = degrade(hr, 4)
        # borders see different clamped support; compare away from them
        np.testing.assert_allclose(twice[3:-3, 3:-3], once[3:-3, 3:-3], atol=1e-3)

    def test_too_small(self):
        with pytest.raises(ImageError):
            degrade(np.zeros((1, 5)), 2)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            degrade(np.zeros((10, 10)), 5)


class TestUpscale:
    @pytest.mark.parametrize("method", ["bilinear", "bicubic"])
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_constant(self, method, scale):
        out = classical_upscale(np.full((5, 7), 0.61), scale, method)
        assert out.shape == (5 * scale, 7 * scale)
        np.testing.assert_allclose(out, 0.61, atol=1e-12)

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_bilinear_ramp(self, scale):
        lr = np.tile(np.arange(8, dtype=float) / 10, (6, 1))
        out = classical_upscale(lr, scale, "bilinear")
        # output pixel u samples lr coordinate (u + .5)/s - .5
        u = np.arange(8 * scale)
        expect = ((u + 0.5) / scale - 0.5) / 10
        inner = (expect >= 0) & (expect <= 0.7)
        np.testing.assert_allclose(out[:, inner], np.tile(expect[inner], (6 * scale, 1)), atol=1e-12)

    @pytest.mark.parametrize("method", ["bilinear", "bicubic"])
    def test_matches_direct_sum(self, method):
        lr = np.random.default_rng(5).uniform(size=(6, 5))
        kernel, radius = (cubic_weight, 2.0) if method == "bicubic" else (
            lambda t: max(0.0, 1 - abs(t)), 1.0)
        np.testing.assert_allclose(
            classical_upscale(lr, 3, method), naive_resize(lr, 3.0, kernel, radius), atol=1e-12
        )

    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(2, 9), w=st.integers(2, 9), scale=st.sampled_from([2, 3, 4]),
        method=st.sampled_from(["bilinear", "bicubic"]), seed=st.integers(0, 1000),
    )
    def test_commutes_with_transpose(self, h, w, scale, method, seed):
        lr = np.random.default_rng(seed).uniform(size=(h, w))
        a = classical_upscale(lr, scale, method).T
        b = classical_upscale(lr.T, scale, method)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_overshoot_bound(self, natural_planes):
        for hr in natural_planes:
            for scale in (2, 3, 4):
                up = classical_upscale(degrade(hr, scale), scale, "bicubic")
                assert up.min() >= -0.05 and up.max() <= 1.05


class TestBlur:
    def test_zero_sigma_identity(self):
        img = np.random.default_rng(0).uniform(size=(7, 9))
        np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)

    def test_constant(self):
        np.testing.assert_allclose(gaussian_blur(np.full((9, 9), 0.3), 1.7), 0.3, atol=1e-12)

    def test_impulse_is_gaussian(self):
        img = np.zeros((21, 21))
        img[10, 10] = 1.0
        out = gaussian_blur(img, 1.5, 6)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        t = np.arange(-6, 7)
        g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * 1.5 ** 2))
        np.testing.assert_allclose(out[4:17, 4:17], g / g.sum(), atol=1e-15)


class TestSobel:
    def test_constant(self):
        gx, gy, mag = sobel_gradients(np.full((6, 6), 0.4))
        assert not gx.any() and not gy.any() and not mag.any()

    def test_vertical_edge(self):
        img = np.zeros((8, 10))
        img[:, 5:] = 1.0
        gx, gy, _ = sobel_gradients(img)
        assert not gy.any()
        assert set(np.argmax(gx, axis=1)) <= {4, 5}
        assert gx[:, 4].min() == gx.max()

    def test_affine_ratio(self):
        yy, xx = np.mgrid[0:9, 0:9].astype(float)
        gx, gy, _ = sobel_gradients(0.01 * (xx + 2 * yy))
        np.testing.assert_allclose(gx[1:-1, 1:-1] / gy[1:-1, 1:-1], 0.5, atol=1e-12)
        np.testing.assert_allclose(gx[1:-1, 1:-1], 0.08, atol=1e-12)
