import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lhsp import imaging
from lhsp.lsp import (
    LspParams,
    StaleCacheError,
    compute_displacement,
    deconv_spec,
    fit_interpolation_kernel,
    interpolation_kernel,
    lsp_backward,
    lsp_forward,
    place_pixels,
)
from lhsp.hsp import same_conv
from oracles import central_difference, rel_err


def plain(scale, kernel=None):
    k = interpolation_kernel(scale) if kernel is None else kernel
    return LspParams(scale, deconv_spec(k, scale))


def with_features(scale, rng, features=4):
    conv1 = same_conv(rng.normal(size=(features, 1, 3, 3)), rng.normal(size=features) * 0.1)
    project = same_conv(rng.normal(size=(1, features, 1, 1)), rng.normal(size=1) * 0.1)
    k = np.abs(rng.normal(size=(1, 1, 2 * scale + 1, 2 * scale + 1))) + 0.1
    return LspParams(scale, deconv_spec(k, scale), conv1, project)


def tiny_disp(shape):
    """Displacement that rounds to no movement but takes the placement path."""
    d = np.zeros(shape)
    d.flat[0] = 0.1
    return d


class TestKernels:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    @pytest.mark.parametrize("method", ["bilinear", "bicubic"])
    def test_each_phase_sums_to_one(self, scale, method):
        size = 4 * scale + 1
        k = interpolation_kernel(scale, size, method)[0, 0]
        for py in range(scale):
            for px in range(scale):
                assert k[py::scale, px::scale].sum() == pytest.approx(1.0, abs=1e-12)

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            interpolation_kernel(2, 4)

    def test_too_small_kernel_rejected(self):
        with pytest.raises(ValueError):
            deconv_spec(np.ones((1, 1, 1, 1)), 4)


class TestDisplacement:
    def test_constant_image(self):
        assert not compute_displacement(np.full((10, 12), 0.3), 2).any()

    def test_lambda_zero(self, natural_planes):
        assert not compute_displacement(natural_planes[0], 3, lam=0).any()

    def test_step_edge_moves_away(self):
        img = np.zeros((12, 12))
        img[:, 6:] = 1.0
        dy, dx = compute_displacement(img, 2)
        assert (dx[:, 5] < 0).all() and (dx[:, 4] < 0).all()
        assert (dx[:, 6] > 0).all() and (dx[:, 7] > 0).all()
        assert not dy.any()

    def test_bounded(self, natural_planes):
        for s in (2, 3, 4):
            d = compute_displacement(natural_planes[1], s, lam=5.0)
            assert np.abs(d).max() <= 0.45 * s

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            compute_displacement(np.zeros((4, 4)), 2, lam=-1)
        with pytest.raises(ValueError):
            compute_displacement(np.zeros((4, 4)), 2, max_disp=1.0)


class TestPlacement:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_zero_displacement_one_cell_each(self, scale, rng):
        lr = rng.random((5, 6)) + 0.1
        g = place_pixels(lr, np.zeros((2, 5, 6)), scale)
        assert g.indicator.sum() == 30 and set(np.unique(g.indicator)) == {0.0, 1.0}
        c = scale // 2
        np.testing.assert_array_equal(g.indicator[c::scale, c::scale], 1.0)
        np.testing.assert_array_equal(g.values[c::scale, c::scale], lr)

    def test_collision_accumulates(self):
        lr = np.array([[0.25, 0.5]])
        d = np.zeros((2, 1, 2))
        d[1, 0, 0] = 0.9   # (1, 1) -> (1, 2)
        d[1, 0, 1] = -0.9  # (1, 3) -> (1, 2)
        g = place_pixels(lr, d, 2)
        assert g.indicator[1, 2] == 2.0 and g.values[1, 2] == 0.75
        assert g.indicator.sum() == 2

    def test_border_clamp(self):
        d = np.full((2, 2, 2), -0.9)
        g = place_pixels(np.ones((2, 2)), d, 2)
        assert g.indicator[0, 0] == 1.0 and g.indicator.sum() == 4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3, 4]))
    def test_conservation(self, seed, scale):
        rng = np.random.default_rng(seed)
        # dyadic values add without rounding, so the sums must agree exactly
        lr = rng.integers(0, 256, size=(7, 5)) / 256.0
        d = rng.uniform(-0.45 * scale, 0.45 * scale, size=(2, 7, 5))
        g = place_pixels(lr, d, scale)
        assert g.values.sum() == lr.sum()
        assert g.indicator.sum() == lr.size
        assert ((g.indicator == 0) == (g.values == 0)).all() or (lr == 0).any()

    def test_origin_records_cells(self, rng):
        lr = rng.random((4, 4))
        d = rng.uniform(-0.9, 0.9, size=(2, 4, 4))
        g = place_pixels(lr, d, 2)
        np.testing.assert_array_equal(g.values.reshape(-1)[g.origin] != 0, True)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match=r"2, 3, 3\).*4, 4\)"):
            place_pixels(np.zeros((4, 4)), np.zeros((2, 3, 3)), 2)


class TestForward:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_bilinear_equivalence(self, scale, natural_planes):
        lr = natural_planes[0][:30, :27]
        ref = imaging.classical_upscale(lr, scale, "bilinear")
        out, mask, _ = lsp_forward(lr[None, None], plain(scale))
        b = scale
        np.testing.assert_allclose(out[0, 0, b:-b, b:-b], ref[b:-b, b:-b], rtol=0, atol=1e-9)
        assert mask.all()

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_strided_and_placed_paths_agree(self, scale, rng):
        lr = rng.random((2, 1, 6, 7))
        k = rng.normal(size=(1, 1, 2 * scale + 1, 2 * scale + 1)) + 1.0
        a, _, _ = lsp_forward(lr, plain(scale, k))
        b, _, _ = lsp_forward(lr, plain(scale, k), tiny_disp((2, 2, 6, 7)))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("displaced", [False, True])
    def test_constant_preserved(self, displaced, rng):
        lr = np.full((1, 1, 9, 9), 0.37)
        k = np.abs(rng.normal(size=(1, 1, 5, 5))) + 0.05
        d = rng.uniform(-0.9, 0.9, size=(1, 2, 9, 9)) if displaced else None
        out, mask, _ = lsp_forward(lr, plain(2, k), d)
        assert mask.all()
        np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("c", [3.0, -2.0, 1e-3])
    @pytest.mark.parametrize("displaced", [False, True])
    def test_kernel_scaling_invariance(self, c, displaced, rng):
        lr = rng.random((2, 1, 8, 8))
        k = np.abs(rng.normal(size=(1, 1, 5, 5))) + 0.05
        d = rng.uniform(-0.9, 0.9, size=(2, 2, 8, 8)) if displaced else None
        a, _, _ = lsp_forward(lr, plain(2, k), d)
        b, _, _ = lsp_forward(lr, plain(2, c * k), d)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_degenerate_denominator_masked(self):
        k = np.zeros((1, 1, 5, 5))
        k[0, 0, 2, 2] = 1.0  # only the cells holding a pixel are reachable
        out, mask, _ = lsp_forward(np.ones((1, 1, 4, 4)), plain(2, k))
        assert mask.sum() == 16 and np.isfinite(out).all()
        assert not out[~mask].any()

    def test_output_shape(self, rng):
        out, _, _ = lsp_forward(rng.random((3, 1, 5, 6)), with_features(3, rng))
        assert out.shape == (3, 1, 15, 18)


class TestBackward:
    @pytest.mark.parametrize("scale", [2, 3])
    @pytest.mark.parametrize("displaced", [False, True])
    def test_finite_differences(self, scale, displaced, rng):
        lr = rng.random((2, 1, 6, 6))
        params = with_features(scale, rng)
        d = rng.uniform(-0.45 * scale, 0.45 * scale, size=(2, 2, 6, 6)) if displaced else None
        w = rng.normal(size=(2, 1, 6 * scale, 6 * scale))

        def loss():
            return float(np.sum(lsp_forward(lr, params, d)[0] * w))

        _, _, cache = lsp_forward(lr, params, d)
        grads, g_lr = lsp_backward(cache, params, w)
        named = params.named_tensors()
        checked = 0
        for name, arr in named.items():
            for flat in rng.choice(arr.size, min(arr.size, 12), replace=False):
                idx = np.unravel_index(flat, arr.shape)
                num = central_difference(loss, arr, idx)
                assert rel_err(grads[name][idx], num) < 1e-5, (name, idx)
                checked += 1
        for flat in rng.choice(lr.size, 10, replace=False):
            idx = np.unravel_index(flat, lr.shape)
            assert rel_err(g_lr[idx], central_difference(loss, lr, idx)) < 1e-5
        assert checked > 20

    def test_zero_upstream(self, rng):
        params = with_features(2, rng)
        _, _, cache = lsp_forward(rng.random((1, 1, 5, 5)), params)
        grads, g = lsp_backward(cache, params, np.zeros((1, 1, 10, 10)))
        assert not any(v.any() for v in grads.values()) and not g.any()

    def test_missing_cache(self, rng):
        with pytest.raises(StaleCacheError):
            lsp_backward(None, plain(2), np.zeros((1, 1, 4, 4)))

    def test_reused_cache(self, rng):
        params = plain(2)
        _, _, cache = lsp_forward(rng.random((1, 1, 3, 3)), params)
        lsp_backward(cache, params, np.ones((1, 1, 6, 6)))
        with pytest.raises(StaleCacheError):
            lsp_backward(cache, params, np.ones((1, 1, 6, 6)))

    def test_stale_parameters(self, rng):
        params = plain(2)
        _, _, cache = lsp_forward(rng.random((1, 1, 3, 3)), params)
        params.deconv.kernel[0, 0, 0, 0] += 1.0
        with pytest.raises(StaleCacheError):
            lsp_backward(cache, params, np.ones((1, 1, 6, 6)))


class TestKernelFit:
    def test_constant_corpus(self):
        pairs = [(np.full((8, 8), v), np.full((16, 16), v)) for v in (0.2, 0.7)]
        fit = fit_interpolation_kernel(pairs, 2, max_iter=20)
        params = plain(2, fit.kernel)
        out, mask, _ = lsp_forward(np.full((1, 1, 8, 8), 0.45), params)
        np.testing.assert_allclose(out[mask], 0.45, atol=1e-9)

    def test_not_worse_than_start_on_bilinear_corpus(self, natural_planes):
        pairs = []
        for p in natural_planes[:3]:
            hr = imaging.gaussian_blur(p[:48, :48], 1.5)
            pairs.append((imaging.resize(hr, 0.5, "bilinear"), hr))
        fit = fit_interpolation_kernel(pairs, 2, max_iter=40)
        assert fit.loss <= fit.initial_loss

        def mse(kernel):
            total = 0.0
            for lr, hr in pairs:
                out = lsp_forward(lr[None, None], plain(2, kernel))[0][0, 0]
                total += np.mean((out[2:-2, 2:-2] - hr[2:-2, 2:-2]) ** 2)
            return total

        assert mse(fit.kernel) <= mse(interpolation_kernel(2, 9))

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            fit_interpolation_kernel([], 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fit_interpolation_kernel([(np.zeros((4, 4)), np.zeros((9, 8)))], 2)


def test_params_validation(rng):
    with pytest.raises(ValueError):
        LspParams(3, deconv_spec(np.ones((1, 1, 5, 5)), 2))
    with pytest.raises(ValueError):
        LspParams(2, deconv_spec(np.ones((1, 1, 4, 4)), 2))
    bad = np.ones((1, 1, 5, 5))
    bad[0, 0, 0, 0] = math.nan
    with pytest.raises(ValueError):
        LspParams(2, deconv_spec(bad, 2))
