"""Locate natural test images that ship with common scientific packages.

Benchmark sets (Set5, Set14, BSDS) are external downloads. For desk-scale
runs we assemble a small corpus from sample images bundled inside
scikit-image, scikit-learn and matplotlib, found by path only so none of
those packages needs to be imported (or installed) for the rest of lhsp.
"""

from __future__ import annotations

import importlib.util
import os
import shutil
from pathlib import Path
from typing import Optional

# natural photographs only; synthetic images (chessboards, logos, phantoms)
# and near-duplicates are left out
TRAIN_IMAGES = (
    ("skimage", "data/astronaut.png"),
    ("skimage", "data/brick.png"),
    ("skimage", "data/chelsea.png"),
    ("skimage", "data/coffee.png"),
    ("skimage", "data/grass.png"),
    ("skimage", "data/gravel.png"),
    ("skimage", "data/hubble_deep_field.jpg"),
    ("skimage", "data/ihc.png"),
    ("skimage", "data/rocket.jpg"),
    ("skimage", "data/retina.jpg"),
    ("sklearn", "datasets/images/china.jpg"),
)
VALIDATION_IMAGES = (
    ("skimage", "data/camera.png"),
    ("skimage", "data/cell.png"),
    ("skimage", "data/clock_motion.png"),
    ("skimage", "data/coins.png"),
    ("skimage", "data/moon.png"),
    ("skimage", "data/page.png"),
    ("skimage", "data/text.png"),
    ("skimage", "data/motorcycle_right.png"),
    ("sklearn", "datasets/images/flower.jpg"),
    ("matplotlib", "mpl-data/sample_data/grace_hopper.jpg"),
)


def _package_dir(name: str) -> Optional[Path]:
    spec = importlib.util.find_spec(name)
    if spec is None or spec.origin is None:
        return None
    return Path(spec.origin).parent


def _resolve(entries) -> list[Path]:
    found = []
    for package, rel in entries:
        root = _package_dir(package)
        if root is not None and (root / rel).is_file():
            found.append(root / rel)
    return found


def bundled_images(split: str = "train") -> list[Path]:
    """Paths of the bundled images available in this environment."""
    if split == "train":
        return _resolve(TRAIN_IMAGES)
    if split == "validation":
        return _resolve(VALIDATION_IMAGES)
    raise ValueError(f"unknown split {split!r}")


def write_corpus(out_dir, split: str = "train") -> Path:
    """Copy bundled images into ``out_dir/hr`` as PNG (the corpus layout)."""
    from .imaging import load_image, save_image

    paths = bundled_images(split)
    if not paths:
        raise FileNotFoundError("no bundled sample images found (install scikit-image)")
    hr = Path(out_dir) / "hr"
    hr.mkdir(parents=True, exist_ok=True)
    for p in paths:
        target = hr / (p.stem + ".png")
        if p.suffix.lower() == ".png":
            shutil.copyfile(p, target)
        else:
            img = load_image(p)
            save_image(os.fspath(target), img.y, img.cb, img.cr)
    return Path(out_dir)
