"""Local structure preserving sub-network.

A feature convolution produces a single intensity plane per LR image. Its
pixels are placed on the HR grid (nudged away from nearby edges), and the
sparse grid is interpolated by a learned deconvolution kernel with Shepard
normalization: the same kernel is applied to the placed values and to the
indicator map counting how many pixels landed in each cell, and the two
results are divided elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import imaging
from .tensor import (
    ConvSpec,
    ShapeError,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
)

SHEPARD_EPS = 1e-8


class StaleCacheError(RuntimeError):
    """Backward called without a matching forward."""


# --- interpolation kernels -------------------------------------------------


def default_kernel_size(scale: int) -> int:
    return 2 * scale + 1


def placement_offset(scale: int) -> float:
    """Distance from an LR pixel's true HR centre to the cell it is placed in.

    The centre of LR pixel ``i`` lies at HR coordinate ``i*s + (s-1)/2``; for
    even ``s`` that is half a cell left of the integer cell ``i*s + s//2``.
    """
    return 0.5 if scale % 2 == 0 else 0.0


def interpolation_kernel(scale: int, size: Optional[int] = None, method: str = "bilinear") -> np.ndarray:
    """(1, 1, size, size) deconvolution kernel reproducing a classical interpolator.

    Tap ``o`` (relative to the kernel centre) carries the weight the classical
    kernel gives an HR pixel ``o`` cells away from a placed LR pixel.
    """
    size = default_kernel_size(scale) if size is None else size
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    fn = {"bilinear": imaging.linear_kernel, "bicubic": imaging.cubic_kernel}[method]
    offsets = np.arange(size) - size // 2
    taps = fn((offsets + placement_offset(scale)) / scale)
    return np.outer(taps, taps).reshape(1, 1, size, size)


def deconv_spec(kernel: np.ndarray, scale: int) -> ConvSpec:
    """Stride-``scale`` transposed convolution whose output, cropped to
    ``scale`` times the input size, is aligned with the placement grid."""
    pad = kernel.shape[2] // 2 - scale // 2
    if pad < 0:
        raise ShapeError(f"kernel {kernel.shape} is too small for scale {scale}")
    return ConvSpec(kernel, None, stride=scale, padding=pad, transposed=True)


# --- parameters --------------------------------------------------------------


@dataclass
class LspParams:
    """Learnable LSP weights.

    ``conv1`` (features, ReLU) and ``project`` (1x1 to one intensity plane)
    may both be ``None``, in which case the LR image itself is placed.
    ``deconv`` holds the interpolation kernel; its bias is fixed at zero
    because a bias would not cancel in the Shepard ratio.
    """

    scale: int
    deconv: ConvSpec
    conv1: Optional[ConvSpec] = None
    project: Optional[ConvSpec] = None

    def __post_init__(self):
        if self.deconv.stride != self.scale or not self.deconv.transposed:
            raise ValueError(
                f"deconv must be transposed with stride {self.scale}, got "
                f"stride {self.deconv.stride} transposed={self.deconv.transposed}"
            )
        k = self.deconv.kernel.shape
        if k[:2] != (1, 1) or k[2] % 2 == 0 or k[3] % 2 == 0:
            raise ShapeError(f"deconv kernel must be (1, 1, odd, odd), got {k}")
        if (self.conv1 is None) != (self.project is None):
            raise ValueError("conv1 and project must be given together")
        for spec in self.specs():
            if not np.all(np.isfinite(spec.kernel)) or not np.all(np.isfinite(spec.bias)):
                raise ValueError("non-finite LSP parameters")

    def specs(self):
        out = [self.deconv]
        if self.conv1 is not None:
            out += [self.conv1, self.project]
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Learnable tensors, keyed by name (shared storage, not copies)."""
        named = {"lsp.deconv.kernel": self.deconv.kernel}
        if self.conv1 is not None:
            named.update({
                "lsp.conv1.kernel": self.conv1.kernel,
                "lsp.conv1.bias": self.conv1.bias,
                "lsp.project.kernel": self.project.kernel,
                "lsp.project.bias": self.project.bias,
            })
        return named

    def copy(self) -> "LspParams":
        return LspParams(
            self.scale,
            self.deconv.copy(),
            None if self.conv1 is None else self.conv1.copy(),
            None if self.project is None else self.project.copy(),
        )


# --- pixel placement ---------------------------------------------------------


def compute_displacement(
    lr: np.ndarray,
    scale: int,
    lam: float = 0.3,
    max_disp: Optional[float] = None,
    sigma: float = 1.0,
) -> np.ndarray:
    """Per-LR-pixel displacement ``(2, h, w)`` = (dy, dx) in HR cells.

    Pixels descend the smoothed Sobel gradient magnitude, so pixels on both
    sides of an edge move away from it while flat regions stay put.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    lr = np.asarray(lr, dtype=np.float64)
    if max_disp is None:
        max_disp = 0.45 * scale
    if max_disp >= 0.5 * scale:
        raise ValueError(f"max displacement {max_disp} must stay below half a cell ({0.5 * scale})")
    if lam == 0 or max_disp == 0:
        return np.zeros((2,) + lr.shape)
    _, _, mag = imaging.sobel_gradients(lr)
    smooth = imaging.gaussian_blur(mag, sigma)
    gx, gy, _ = imaging.sobel_gradients(smooth)
    disp = np.stack([-lam * scale * gy, -lam * scale * gx])
    return np.clip(disp, -max_disp, max_disp)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass
class PlacedGrid:
    """Splatted values and counts on the HR grid.

    ``origin`` holds, for every LR pixel in row-major order, the flat HR
    cell index it landed in: the record needed to route gradients back.
    """

    values: np.ndarray
    indicator: np.ndarray
    origin: np.ndarray


def placement_cells(disp: np.ndarray, scale: int, hr_shape) -> np.ndarray:
    """Flat HR cell index for each LR pixel of a ``(B, 2, h, w)`` displacement."""
    b, _, h, w = disp.shape
    hh, ww = hr_shape
    base = scale // 2
    rows = np.arange(h)[:, None] * scale + base + _round_half_away(disp[:, 0])
    cols = np.arange(w)[None, :] * scale + base + _round_half_away(disp[:, 1])
    rows = np.clip(rows, 0, hh - 1).astype(np.int64)
    cols = np.clip(cols, 0, ww - 1).astype(np.int64)
    batch = np.arange(b)[:, None, None] * (hh * ww)
    return (batch + rows * ww + cols).reshape(-1)


def place_pixels(lr: np.ndarray, disp: np.ndarray, scale: int) -> PlacedGrid:
    """Splat LR pixels onto the HR grid; collisions accumulate.

    ``lr`` is ``(h, w)`` or ``(B, 1, h, w)``; ``disp`` has a matching leading
    layout with 2 displacement channels.
    """
    squeeze = lr.ndim == 2
    if squeeze:
        lr = lr[None, None]
        disp = disp[None]
    b, c, h, w = lr.shape
    if c != 1 or disp.shape != (b, 2, h, w):
        raise ShapeError(f"displacement shape {disp.shape} does not match image shape {lr.shape}")
    hr_shape = (h * scale, w * scale)
    origin = placement_cells(disp, scale, hr_shape)
    n = b * hr_shape[0] * hr_shape[1]
    values = np.bincount(origin, weights=lr.reshape(-1), minlength=n)
    indicator = np.bincount(origin, minlength=n).astype(np.float64)
    shape = (b, 1) + hr_shape
    values, indicator = values.reshape(shape), indicator.reshape(shape)
    if squeeze:
        return PlacedGrid(values[0, 0], indicator[0, 0], origin)
    return PlacedGrid(values, indicator, origin)


# --- forward / backward --------------------------------------------------------


def _hr_spec(kernel: np.ndarray) -> ConvSpec:
    """Stride-1 form of the deconvolution, applied to an already placed grid."""
    return ConvSpec(kernel, None, stride=1, padding=kernel.shape[2] // 2, transposed=True)


def shepard_divide(num: np.ndarray, den: np.ndarray, eps: float = SHEPARD_EPS):
    """``num / den`` where the deconvolved indicator is usable, else 0.

    Returns the quotient and the validity mask ``|den| > eps``.
    """
    mask = np.abs(den) > eps
    safe = np.where(mask, den, 1.0)
    return np.where(mask, num / safe, 0.0), mask


@dataclass
class LspCache:
    params_snapshot: list
    lr: np.ndarray
    pre: Optional[np.ndarray]
    feat: Optional[np.ndarray]
    plane: np.ndarray
    placed: Optional[PlacedGrid]
    num: np.ndarray
    den: np.ndarray
    out: np.ndarray
    mask: np.ndarray
    strided: bool
    used: bool = field(default=False)


def _snapshot(params: LspParams) -> list:
    return [t.copy() for t in params.named_tensors().values()]


def lsp_forward(lr: np.ndarray, params: LspParams, disp: Optional[np.ndarray] = None,
                eps: float = SHEPARD_EPS):
    """Upsample a ``(B, 1, h, w)`` batch; returns ``(h_lsp, mask, cache)``.

    With no displacement (``None`` or all zero) the placement is the regular
    zero-insertion grid, and the deconvolution is evaluated as a strided
    transposed convolution on the LR plane, which is the same map.
    """
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim != 4 or lr.shape[1] != 1:
        raise ShapeError(f"LR batch must be (B, 1, h, w), got {lr.shape}")
    s = params.scale
    b, _, h, w = lr.shape
    if params.conv1 is not None:
        pre = conv2d(lr, params.conv1)
        feat = relu(pre)
        plane = conv2d(feat, params.project)
    else:
        pre = feat = None
        plane = lr
    strided = disp is None or not np.any(disp)
    kernel = params.deconv.kernel
    if strided:
        placed = None
        spec = deconv_spec(kernel, s)
        num = transposed_conv2d(plane, spec)[:, :, : h * s, : w * s]
        den = transposed_conv2d(np.ones_like(plane), spec)[:, :, : h * s, : w * s]
    else:
        if disp.shape != (b, 2, h, w):
            raise ShapeError(f"displacement shape {disp.shape} does not match LR batch {lr.shape}")
        placed = place_pixels(plane, disp, s)
        spec = _hr_spec(kernel)
        num = transposed_conv2d(placed.values, spec)
        den = transposed_conv2d(placed.indicator, spec)
    out, mask = shepard_divide(num, den, eps)
    cache = LspCache(_snapshot(params), lr, pre, feat, plane, placed, num, den, out, mask, strided)
    return out, mask, cache


def lsp_backward(cache: LspCache, params: LspParams, grad_out: np.ndarray):
    """Gradients of the LSP output w.r.t. its parameters and its LR input.

    Placement is piecewise constant in the displacement, which is computed
    from the input rather than learned; the gradient at each HR cell is sent
    back to the LR pixel recorded in the placement's origin map.
    """
    if cache is None:
        raise StaleCacheError("lsp_backward needs the cache returned by lsp_forward")
    if cache.used:
        raise StaleCacheError("cache already consumed by a previous backward pass")
    current = list(params.named_tensors().values())
    if len(current) != len(cache.params_snapshot) or any(
        not np.array_equal(a, b) for a, b in zip(current, cache.params_snapshot)
    ):
        raise StaleCacheError("parameters changed since the forward pass")
    if grad_out.shape != cache.out.shape:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != output shape {cache.out.shape}")
    cache.used = True

    s = params.scale
    mask = cache.mask
    safe = np.where(mask, cache.den, 1.0)
    g_num = np.where(mask, grad_out / safe, 0.0)
    g_den = np.where(mask, -grad_out * cache.out / safe, 0.0)

    kernel = params.deconv.kernel
    if cache.strided:
        spec = deconv_spec(kernel, s)
        b, _, h, w = cache.plane.shape
        full = (b, 1, (h - 1) * s - 2 * spec.padding + kernel.shape[2],
                (w - 1) * s - 2 * spec.padding + kernel.shape[3])

        def padded(g):
            # the forward pass cropped the transposed output to h*s x w*s
            out = np.zeros(full)
            out[:, :, : h * s, : w * s] = g
            return out

        g_plane, gk_num, _ = transposed_conv2d_backward(cache.plane, spec, padded(g_num))
        _, gk_den, _ = transposed_conv2d_backward(np.ones_like(cache.plane), spec, padded(g_den))
    else:
        spec = _hr_spec(kernel)
        g_values, gk_num, _ = transposed_conv2d_backward(cache.placed.values, spec, g_num)
        _, gk_den, _ = transposed_conv2d_backward(cache.placed.indicator, spec, g_den)
        g_plane = g_values.reshape(-1)[cache.placed.origin].reshape(cache.plane.shape)

    grads = {"lsp.deconv.kernel": gk_num + gk_den}
    if params.conv1 is None:
        return grads, g_plane
    g_feat, gk_p, gb_p = conv2d_backward(cache.feat, params.project, g_plane)
    g_pre = relu_backward(cache.pre, g_feat)
    g_lr, gk_1, gb_1 = conv2d_backward(cache.lr, params.conv1, g_pre)
    grads.update({
        "lsp.conv1.kernel": gk_1,
        "lsp.conv1.bias": gb_1,
        "lsp.project.kernel": gk_p,
        "lsp.project.bias": gb_p,
    })
    return grads, g_lr


def batch_displacement(lr: np.ndarray, scale: int, lam: float, max_disp: Optional[float],
                       sigma: float = 1.0) -> np.ndarray:
    """Displacements for a ``(B, 1, h, w)`` batch, stacked to ``(B, 2, h, w)``."""
    return np.stack([compute_displacement(x[0], scale, lam, max_disp, sigma) for x in lr])


# --- fixed-kernel fitting ------------------------------------------------------


@dataclass
class KernelFit:
    kernel: np.ndarray
    loss: float
    initial_loss: float
    iterations: int
    converged: bool


def _kernel_objective(pairs, scale: int, border: int):
    """Mean squared error of the Shepard deconvolution over ``pairs`` and its
    gradient with respect to the (flattened) kernel."""
    total = sum((hr.shape[0] - 2 * border) * (hr.shape[1] - 2 * border) for _, hr in pairs)

    def f(flat, size):
        kernel = flat.reshape(1, 1, size, size)
        params = LspParams(scale, deconv_spec(kernel, scale))
        loss, grad = 0.0, np.zeros_like(kernel)
        for lr, hr in pairs:
            out, mask, cache = lsp_forward(lr[None, None], params)
            r = np.zeros_like(out)
            inner = (slice(None), slice(None), slice(border, out.shape[2] - border),
                     slice(border, out.shape[3] - border))
            r[inner] = (out - hr[None, None])[inner]
            r = np.where(mask, r, 0.0)
            loss += float(np.sum(r * r))
            g, _ = lsp_backward(cache, params, 2.0 * r)
            grad += g["lsp.deconv.kernel"]
        return loss / total, grad.reshape(-1) / total

    return f


def fit_interpolation_kernel(pairs, scale: int, size: Optional[int] = None,
                             init: str = "bilinear", max_iter: int = 200,
                             border: Optional[int] = None) -> KernelFit:
    """Learn one deconvolution kernel from ``(lr, hr)`` plane pairs.

    Only the interpolation kernel is fitted (no features, no placement), by
    minimizing squared error against HR with L-BFGS. The error ignores a
    ``border`` (default ``scale``) pixel frame, like the evaluation metrics.
    ``size`` defaults to ``4*scale + 1``, wide enough to contain bicubic.
    """
    from scipy.optimize import minimize

    pairs = [(np.asarray(lr, dtype=np.float64), np.asarray(hr, dtype=np.float64))
             for lr, hr in pairs]
    if not pairs:
        raise ValueError("kernel fitting needs at least one (lr, hr) pair")
    for lr, hr in pairs:
        if hr.shape != (lr.shape[0] * scale, lr.shape[1] * scale):
            raise ShapeError(f"HR {hr.shape} is not {scale}x LR {lr.shape}")
    size = 4 * scale + 1 if size is None else size
    border = scale if border is None else border
    k0 = interpolation_kernel(scale, size, init).reshape(-1)
    f = _kernel_objective(pairs, scale, border)
    initial, _ = f(k0, size)
    res = minimize(f, k0, args=(size,), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-12})
    return KernelFit(res.x.reshape(1, 1, size, size), float(res.fun), initial,
                     int(res.nit), bool(res.success))
