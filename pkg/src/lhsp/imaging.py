"""Image planes, colour conversion, degradation and classical resampling.

An image plane is a 2-D float64 array (height x width) of luminance values
in [0, 1]. Resampling follows the image-centre alignment convention: output
pixel ``u`` samples input coordinate ``(u + 0.5) / scale - 0.5``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from PIL import Image

# ITU-R BT.601 full-range (JFIF) forward matrix; offsets of 0.5 on chroma.
_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])

# BT.601 studio-swing luma (16..235), the convention of MATLAB's rgb2ycbcr.
_STUDIO_LUMA = np.array([65.481, 128.553, 24.966]) / 255.0
_STUDIO_OFFSET = 16.0 / 255.0

SCALES = (2, 3, 4)


class ImageError(ValueError):
    """Unreadable, unsupported or inconsistent image data."""


@dataclass
class LoadedImage:
    """Working luminance plane plus the chroma needed to rebuild colour."""

    y: np.ndarray
    cb: Optional[np.ndarray] = None
    cr: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None

    @property
    def is_color(self) -> bool:
        return self.cb is not None


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) RGB in [0, 1] to full-range YCbCr in [0, 1]."""
    return np.asarray(rgb, dtype=np.float64) @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return (np.asarray(ycc, dtype=np.float64) - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T


def rgb_to_luma(rgb: np.ndarray, convention: str = "full") -> np.ndarray:
    """Luma of an RGB array in [0, 1].

    ``full`` is the JFIF range used throughout the pipeline; ``studio`` maps
    to 16/255..235/255 and reproduces how published benchmark tables were
    measured.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if convention == "full":
        return rgb @ _RGB_TO_YCBCR[0]
    if convention == "studio":
        return rgb @ _STUDIO_LUMA + _STUDIO_OFFSET
    raise ValueError(f"unknown luma convention {convention!r}")


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the nearest 8-bit level and return it back in [0, 1]."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> LoadedImage:
    """Read an 8-bit grayscale or colour image (PNG, PGM/PPM, JPEG)."""
    path = os.fspath(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L", "P", "RGB", "RGBA", "LA"):
                if mode == "P":
                    im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                elif mode == "1":
                    im = im.convert("L")
                arr = np.asarray(im)
            else:
                raise ImageError(f"{path}: unsupported mode {mode!r} (need 8-bit gray or RGB)")
    except ImageError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageError(f"{path}: cannot read image ({exc})") from exc

    if arr.dtype != np.uint8:
        raise ImageError(f"{path}: unsupported bit depth {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] in (2, 4):
        arr = arr[..., :-1]  # drop alpha
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    data = arr.astype(np.float64) / 255.0
    if data.ndim == 2:
        return LoadedImage(y=data)
    ycc = rgb_to_ycbcr(data)
    return LoadedImage(y=ycc[..., 0], cb=ycc[..., 1], cr=ycc[..., 2], rgb=data)


def image_size(path) -> tuple[int, int]:
    """(width, height) without decoding pixel data."""
    try:
        with Image.open(os.fspath(path)) as im:
            return im.size
    except OSError as exc:
        raise ImageError(f"{path}: cannot read image ({exc})") from exc


def compose_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    return np.clip(ycbcr_to_rgb(np.stack([y, cb, cr], axis=-1)), 0.0, 1.0)


def save_image(path, y: np.ndarray, cb=None, cr=None) -> None:
    """Write a plane (or Y/Cb/Cr triple) as 8-bit PNG or PGM/PPM.

    The file is written to a temporary name and renamed so a failure never
    leaves a partial image behind.
    """
    path = os.fspath(path)
    if cb is None:
        arr = to_uint8(y)
    else:
        arr = to_uint8(compose_rgb(y, cb, cr))
    ext = os.path.splitext(path)[1].lower()
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}.get(ext)
    if fmt is None:
        raise ImageError(f"{path}: unsupported output format {ext!r} (use .png or .pgm)")
    tmp = path + ".tmp"
    try:
        Image.fromarray(arr).save(tmp, format=fmt)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# --- resampling ----------------------------------------------------------


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def linear_kernel(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


_KERNELS: dict[str, tuple[Callable, float]] = {
    "bicubic": (cubic_kernel, 2.0),
    "bilinear": (linear_kernel, 1.0),
}


def resample_matrix(in_len: int, out_len: int, scale: float, method: str) -> np.ndarray:
    """(out_len, in_len) interpolation weights along one axis.

    When shrinking, the kernel is stretched by ``1/scale`` so it also acts
    as the anti-aliasing filter. Indices beyond the border are clamped and
    every row is normalized to sum to one.
    """
    kernel, radius = _KERNELS[method]
    stretch = 1.0 / scale if scale < 1 else 1.0
    centres = (np.arange(out_len) + 0.5) / scale - 0.5
    support = int(math.ceil(radius * stretch)) + 2
    left = np.floor(centres).astype(int) - support + 1
    taps = left[:, None] + np.arange(2 * support)[None, :]
    weights = kernel((centres[:, None] - taps) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps.shape[1])
    np.add.at(mat, (rows, np.clip(taps, 0, in_len - 1).ravel()), weights.ravel())
    return mat


def resize(img: np.ndarray, scale: float, method: str = "bicubic") -> np.ndarray:
    """Separable resampling by ``scale`` (> 1 enlarges)."""
    if method not in _KERNELS:
        raise ValueError(f"unknown interpolation method {method!r}")
    h, w = img.shape
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise ImageError(f"image {w}x{h} too small to resize by {scale}")
    rows = resample_matrix(h, oh, scale, method)
    cols = resample_matrix(w, ow, scale, method)
    return rows @ img @ cols.T


def classical_upscale(lr: np.ndarray, scale: int, method: str = "bicubic") -> np.ndarray:
    """Fixed-kernel interpolation: each output is a weighted sum of a local window."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    return resize(np.asarray(lr, dtype=np.float64), float(scale), method)


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape
    return img[: h - h % scale, : w - w % scale]


def default_blur_sigma(scale: int) -> float:
    return 0.8 * scale / 2.0


def degrade(
    hr: np.ndarray,
    scale: int,
    blur_sigma: float = 0.0,
    blur_radius: Optional[int] = None,
) -> np.ndarray:
    """Manufacture the low-resolution observation of ``hr``.

    Optional Gaussian blur followed by anti-aliased bicubic decimation. The
    input is first cropped to a multiple of ``scale``.
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    hr = np.asarray(hr, dtype=np.float64)
    if hr.shape[0] < scale or hr.shape[1] < scale:
        raise ImageError(f"image {hr.shape[1]}x{hr.shape[0]} is smaller than scale {scale}")
    img = modcrop(hr, scale)
    if blur_sigma > 0:
        img = gaussian_blur(img, blur_sigma, blur_radius)
    return resize(img, 1.0 / scale, "bicubic")


# --- filtering -----------------------------------------------------------


def gaussian_kernel_1d(sigma: float, radius: Optional[int] = None) -> np.ndarray:
    if radius is None:
        radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _correlate_1d(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img, dtype=np.float64)
    for i, t in enumerate(taps):
        if t == 0:
            continue
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + n)
        out += t * padded[tuple(sl)]
    return out


def gaussian_blur(img: np.ndarray, sigma: float, radius: Optional[int] = None) -> np.ndarray:
    """Separable normalized Gaussian blur with mirrored borders; sigma 0 is a no-op."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel_1d(sigma, radius)
    return _correlate_1d(_correlate_1d(img, k, 0), k, 1)


def sobel_gradients(img: np.ndarray):
    """Standard 3x3 Sobel responses (gx, gy) and their magnitude.

    Borders are reflected. ``gx`` is positive where intensity grows with the
    column index, ``gy`` where it grows with the row index.
    """
    img = np.asarray(img, dtype=np.float64)
    p = np.pad(img, 1, mode="reflect") if min(img.shape) > 1 else np.pad(img, 1, mode="edge")
    h, w = img.shape
    dx = p[:, 2:] - p[:, :-2]  # (h+2, w)
    dy = p[2:, :] - p[:-2, :]  # (h, w+2)
    gx = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy, np.hypot(gx, gy)
