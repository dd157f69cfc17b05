"""PSNR / SSIM and the evaluation harness that produces benchmark tables."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import imaging

PSNR_SENTINEL = 100.0
IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".pgm", ".ppm", ".tif", ".tiff")


def _crop(img: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return img
    return img[border:-border, border:-border]


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """Peak signal-to-noise ratio in dB for planes in [0, 1].

    Identical inputs return ``PSNR_SENTINEL`` (100 dB), which also caps the
    result.
    """
    a, b = _check_pair(a, b)
    d = _crop(a, border) - _crop(b, border)
    if d.size == 0:
        raise ValueError(f"border crop {border} leaves no pixels of {a.shape}")
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i : h - n + 1 + i] for i in range(n))
    return sum(g[j] * rows[:, j : w - n + 1 + j] for j in range(n))


def ssim(a: np.ndarray, b: np.ndarray, border: int = 0, *, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions."""
    a, b = _check_pair(a, b)
    a, b = _crop(a, border), _crop(b, border)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} (after crop) is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --- evaluation ------------------------------------------------------------


@dataclass
class EvalRecord:
    name: str
    scale: int
    method: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    records: list = field(default_factory=list)

    def aggregates(self) -> dict:
        """``{(method, scale): (mean_psnr, mean_ssim, count)}`` in first-seen order."""
        groups: dict = {}
        for r in self.records:
            groups.setdefault((r.method, r.scale), []).append(r)
        return {
            key: (
                math.fsum(r.psnr_db for r in rs) / len(rs),
                math.fsum(r.ssim for r in rs) / len(rs),
                len(rs),
            )
            for key, rs in groups.items()
        }

    def extend(self, other: "EvalReport") -> None:
        self.records.extend(other.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "scale", "method", "psnr_db", "ssim"])
        for r in self.records:
            w.writerow([r.name, r.scale, r.method, repr(r.psnr_db), repr(r.ssim)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = csv.DictReader(io.StringIO(text))
        return cls([
            EvalRecord(r["name"], int(r["scale"]), r["method"], float(r["psnr_db"]), float(r["ssim"]))
            for r in rows
        ])

    def table(self, title: str = "") -> str:
        """Plain-text table: one row per scale, PSNR/SSIM column pair per method."""
        agg = self.aggregates()
        methods = list(dict.fromkeys(m for m, _ in agg))
        scales = sorted({s for _, s in agg})
        head1 = f"{'Test set':<10}{'Scale':>6} " + "".join(f"{m:^18}" for m in methods)
        head2 = f"{'':<10}{'':>6} " + "".join(f"{'PSNR':>8}{'SSIM':>9} " for _ in methods)
        lines = [head1.rstrip(), head2.rstrip()]
        for i, s in enumerate(scales):
            cells = []
            for m in methods:
                v = agg.get((m, s))
                cells.append(f"{v[0]:8.2f}{v[1]:9.4f} " if v else f"{'-':>8}{'-':>9} ")
            label = title if i == 0 else ""
            lines.append((f"{label:<10}{s:>6} " + "".join(cells)).rstrip())
        return "\n".join(lines) + "\n"


def list_images(test_dir) -> list[Path]:
    root = Path(test_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"test directory not found: {root}")
    if (root / "hr").is_dir():
        root = root / "hr"
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def reference_luma(img: imaging.LoadedImage, convention: str) -> np.ndarray:
    if img.rgb is None or convention == "full":
        return img.y
    return imaging.rgb_to_luma(img.rgb, convention)


def evaluate_method(
    images: Iterable,
    upscaler: Callable[[np.ndarray, int], np.ndarray],
    scale: int,
    method: str,
    border: Optional[int] = None,
    *,
    quantize: bool = True,
    luma: str = "full",
    blur_sigma: float = 0.0,
) -> EvalReport:
    """Degrade each image, upscale it, and score against the original.

    ``images`` is a directory or an iterable of paths; ``upscaler(lr, scale)``
    returns an HR plane. Method ``"oracle"`` skips the upscaler and scores the
    ground truth against itself. ``luma="studio"`` scores on 16..235 luma as
    classic SR tables do.
    With ``quantize`` both planes are rounded to 8 bits before scoring, and
    the LR input is quantized too (it would be stored as an 8-bit image).
    """
    if isinstance(images, (str, os.PathLike)):
        images = list_images(images)
    paths = list(images)
    if not paths:
        raise ValueError("empty test set")
    border = scale if border is None else border
    report = EvalReport()
    for p in paths:
        img = imaging.load_image(p)
        hr = imaging.modcrop(reference_luma(img, luma), scale)
        if quantize:
            hr = imaging.quantize(hr)
        lr = imaging.degrade(hr, scale, blur_sigma)
        if quantize:
            lr = imaging.quantize(lr)
        out = upscaler(lr, scale) if method != "oracle" else hr
        if out.shape != hr.shape:
            raise ValueError(f"{p}: upscaler returned {out.shape}, expected {hr.shape}")
        out = np.clip(out, 0.0, 1.0)
        if quantize:
            out = imaging.quantize(out)
        report.records.append(
            EvalRecord(Path(p).stem, scale, method, psnr(out, hr, border), ssim(out, hr, border))
        )
    return report


def classical_upscaler(method: str):
    def run(lr, scale):
        return imaging.classical_upscale(lr, scale, method)

    return run
