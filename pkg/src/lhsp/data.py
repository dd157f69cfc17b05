"""Training triplets (LR, HR, boundary) and the binary dataset container.

Container layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"LHSPDS01"
    8       4     u32 format version (1)
    12      4     u32 manifest length M
    16      M     manifest, UTF-8 JSON with sorted keys
    16+M    4     u32 HR patch side P
    20+M    4     u32 LR patch side p = P / scale
    24+M    4     u32 record count N
    28+M    ...   N fixed-size records

    record: u32 source index, u32 row, u32 col, u8 blurred flag, 3 pad bytes,
            then float32 LR[p*p], float32 HR[P*P], float32 boundary[P*P],
            each row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import imaging
from .metrics import IMAGE_SUFFIXES

MAGIC = b"LHSPDS01"
VERSION = 1
BLUR_MODES = ("none", "all", "augment")


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    scale: int = 2
    patch_size: int = 32
    stride: int = 12
    blur: str = "none"
    blur_sigma: Optional[float] = None
    blur_radius: Optional[int] = None
    quantize: bool = True
    max_triplets: Optional[int] = None
    seed: int = 0
    sources: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    boundary_sources: list = field(default_factory=list)
    total: int = 0
    total_without_augmentation: int = 0

    def __post_init__(self):
        if self.scale not in imaging.SCALES:
            raise DatasetError(f"scale must be one of {imaging.SCALES}, got {self.scale}")
        if self.patch_size % self.scale:
            raise DatasetError(f"patch size {self.patch_size} not divisible by scale {self.scale}")
        if self.stride < 1:
            raise DatasetError("stride must be >= 1")
        if self.blur not in BLUR_MODES:
            raise DatasetError(f"blur must be one of {BLUR_MODES}, got {self.blur!r}")
        if self.blur != "none" and self.blur_sigma is None:
            self.blur_sigma = imaging.default_blur_sigma(self.scale)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def summary(self) -> str:
        lines = [
            f"scale {self.scale}, patch {self.patch_size}, stride {self.stride}, blur {self.blur}"
            + (f" (sigma {self.blur_sigma:g})" if self.blur != "none" else ""),
            f"sources: {len(self.sources)}",
        ]
        for name, n, b in zip(self.sources, self.counts, self.boundary_sources):
            lines.append(f"  {name}: {n} triplets, boundary from {b}")
        lines.append(f"triplets: {self.total} ({self.total_without_augmentation} before blur augmentation)")
        return "\n".join(lines)


@dataclass
class TrainingTriplet:
    lr: np.ndarray
    hr: np.ndarray
    boundary: np.ndarray
    source: int
    offset: tuple
    blurred: bool = False


# --- patches and boundaries --------------------------------------------------


def patch_offsets(h: int, w: int, size: int, stride: int) -> list[tuple[int, int]]:
    if h < size or w < size:
        return []
    return [(r, c) for r in range(0, h - size + 1, stride) for c in range(0, w - size + 1, stride)]


def extract_patches(image: np.ndarray, size: int, stride: int):
    """All ``size`` x ``size`` patches at stride-aligned offsets, row-major."""
    h, w = image.shape
    return [(image[r : r + size, c : c + size].copy(), (r, c))
            for r, c in patch_offsets(h, w, size, stride)]


def make_boundary_map(hr: np.ndarray, source: str = "sobel-fallback", annotation=None) -> np.ndarray:
    """Edge-strength map in [0, 1] aligned with ``hr``.

    ``annotation-file`` reads ``annotation`` (a path) as a grayscale image;
    ``sobel-fallback`` uses the Sobel magnitude divided by its image maximum.
    """
    if source == "annotation-file":
        if annotation is None:
            raise DatasetError("annotation-file boundary source needs an annotation path")
        ann = imaging.load_image(annotation)
        b = ann.y
        if b.shape != hr.shape:
            raise DatasetError(
                f"{annotation}: boundary is {b.shape[1]}x{b.shape[0]}, "
                f"image is {hr.shape[1]}x{hr.shape[0]}"
            )
        return np.clip(b, 0.0, 1.0)
    if source == "sobel-fallback":
        _, _, mag = imaging.sobel_gradients(hr)
        peak = mag.max()
        if peak == 0:
            return np.zeros_like(hr)
        return np.clip(mag / peak, 0.0, 1.0)
    raise DatasetError(f"unknown boundary source {source!r}")


def corpus_sources(corpus_dir) -> list[tuple[Path, Optional[Path]]]:
    """``hr/*`` images paired with ``boundary/<same stem>.*`` when present."""
    root = Path(corpus_dir)
    hr_dir = root / "hr"
    if not hr_dir.is_dir():
        raise DatasetError(f"corpus {root} has no hr/ directory")
    bdir = root / "boundary"
    boundaries = {}
    if bdir.is_dir():
        boundaries = {p.stem: p for p in bdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    hr = sorted(p for p in hr_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not hr:
        raise DatasetError(f"corpus {root} has no images in hr/")
    return [(p, boundaries.get(p.stem)) for p in hr]


def load_luma(path, quantize: bool = True) -> np.ndarray:
    y = imaging.load_image(path).y
    return imaging.quantize(y) if quantize else y


def degrade_patch(hr: np.ndarray, manifest: DatasetManifest, blurred: bool) -> np.ndarray:
    sigma = manifest.blur_sigma if blurred else 0.0
    lr = imaging.degrade(hr, manifest.scale, sigma, manifest.blur_radius)
    return imaging.quantize(lr) if manifest.quantize else lr


def _blur_variants(manifest: DatasetManifest) -> tuple:
    return {"none": (False,), "all": (True,), "augment": (False, True)}[manifest.blur]


def triplet_keys(corpus_dir, manifest: DatasetManifest) -> list[tuple[int, int, int, bool]]:
    """(source, row, col, blurred) for every triplet, in container order:
    source order, then row-major offset, clean before blurred."""
    keys = []
    for index, (path, _) in enumerate(corpus_sources(corpus_dir)):
        w, h = imaging.image_size(path)
        for r, c in patch_offsets(h, w, manifest.patch_size, manifest.stride):
            keys.extend((index, r, c, b) for b in _blur_variants(manifest))
    return keys


def iter_triplets(corpus_dir, manifest: DatasetManifest, keys=None) -> Iterator[TrainingTriplet]:
    """Materialize triplets for ``keys`` (default: all), loading each source once."""
    sources = corpus_sources(corpus_dir)
    if keys is None:
        keys = triplet_keys(corpus_dir, manifest)
    current, hr, bmap = None, None, None
    size = manifest.patch_size
    for index, r, c, blurred in keys:
        if index != current:
            path, ann = sources[index]
            hr = load_luma(path, manifest.quantize)
            bmap = make_boundary_map(hr, "annotation-file" if ann else "sobel-fallback", ann)
            current = index
        patch = hr[r : r + size, c : c + size]
        yield TrainingTriplet(degrade_patch(patch, manifest, blurred), patch.copy(),
                              bmap[r : r + size, c : c + size].copy(), index, (r, c), blurred)


def _record_dtype(p: int, big: int) -> np.dtype:
    return np.dtype([
        ("source", "<u4"), ("row", "<u4"), ("col", "<u4"), ("blurred", "u1"), ("pad", "u1", 3),
        ("lr", "<f4", (p, p)), ("hr", "<f4", (big, big)), ("boundary", "<f4", (big, big)),
    ])


def build_dataset(corpus_dir, out_path, manifest: DatasetManifest) -> DatasetManifest:
    """Write the corpus triplets to ``out_path``; returns the filled manifest.

    With ``max_triplets`` a seeded subset is kept (in container order).
    """
    sources = corpus_sources(corpus_dir)
    keys = triplet_keys(corpus_dir, manifest)
    if not keys:
        raise DatasetError(f"corpus {corpus_dir} yields zero triplets at patch {manifest.patch_size}")
    if manifest.max_triplets is not None and len(keys) > manifest.max_triplets:
        keep = np.random.default_rng(manifest.seed).choice(len(keys), manifest.max_triplets,
                                                           replace=False)
        keys = [keys[i] for i in np.sort(keep)]

    counts = [0] * len(sources)
    for k in keys:
        counts[k[0]] += 1
    manifest.sources = [p.name for p, _ in sources]
    manifest.counts = counts
    manifest.boundary_sources = ["annotation" if a else "sobel" for _, a in sources]
    manifest.total = len(keys)
    manifest.total_without_augmentation = sum(1 for k in keys if not k[3])

    big = manifest.patch_size
    small = big // manifest.scale
    records = np.zeros(len(keys), dtype=_record_dtype(small, big))
    for i, t in enumerate(iter_triplets(corpus_dir, manifest, keys)):
        rec = records[i]
        rec["source"], rec["row"], rec["col"] = t.source, t.offset[0], t.offset[1]
        rec["blurred"] = int(t.blurred)
        rec["lr"], rec["hr"], rec["boundary"] = t.lr, t.hr, t.boundary
    meta = manifest.to_json().encode("utf-8")
    tmp = os.fspath(out_path) + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(meta)))
            f.write(meta)
            f.write(struct.pack("<III", big, small, len(records)))
            f.write(records.tobytes())
        os.replace(tmp, out_path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return manifest


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: np.ndarray
    digest: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @property
    def scale(self) -> int:
        return self.manifest.scale

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(lr, hr, boundary) as float64 ``(B, 1, h, w)`` arrays."""
        r = self.records[np.asarray(indices)]
        as4 = lambda a: a.astype(np.float64)[:, None]  # noqa: E731
        return as4(r["lr"]), as4(r["hr"]), as4(r["boundary"])

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        """A seeded random selection of ``n`` records (all of them if fewer)."""
        if n >= len(self):
            return self
        keep = np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        return Dataset(self.manifest, self.records[keep], f"{self.digest}:subset:{n}:{seed}")

    def triplet(self, i: int) -> TrainingTriplet:
        r = self.records[i]
        return TrainingTriplet(r["lr"].astype(np.float64), r["hr"].astype(np.float64),
                               r["boundary"].astype(np.float64), int(r["source"]),
                               (int(r["row"]), int(r["col"])), bool(r["blurred"]))


def load_dataset(path) -> Dataset:
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read dataset ({exc})") from exc
    if data[:8] != MAGIC:
        raise DatasetError(f"{path}: not an lhsp dataset (bad magic)")
    version, mlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    manifest = DatasetManifest.from_json(data[16 : 16 + mlen].decode("utf-8"))
    big, small, n = struct.unpack_from("<III", data, 16 + mlen)
    dtype = _record_dtype(small, big)
    body = data[28 + mlen :]
    if len(body) != n * dtype.itemsize:
        raise DatasetError(f"{path}: truncated dataset ({len(body)} bytes for {n} records)")
    records = np.frombuffer(body, dtype=dtype, count=n)
    return Dataset(manifest, records, hashlib.sha256(data).hexdigest())


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(n: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """Index batches for one epoch; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def batch_stream(n: int, batch_size: int, seed: int, start_iteration: int = 0) -> Iterator[np.ndarray]:
    """Endless batches across epochs, resumable at any iteration count."""
    per_epoch = -(-n // batch_size)
    epoch, skip = divmod(start_iteration, per_epoch)
    while True:
        for i, b in enumerate(batch_iter(n, batch_size, seed, epoch)):
            if i >= skip:
                yield b
        skip = 0
        epoch += 1
