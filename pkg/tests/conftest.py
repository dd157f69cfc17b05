import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lhsp.corpus import bundled_images  # noqa: E402
from lhsp.imaging import load_image  # noqa: E402


def _centre_crop(img, size):
    h, w = img.shape
    top, left = max(0, (h - size) // 2), max(0, (w - size) // 2)
    return img[top : top + size, left : left + size]


@pytest.fixture(scope="session")
def natural_planes():
    """Centre crops (96x96 luminance) of a few bundled natural photographs."""
    paths = bundled_images("validation")[:5]
    if not paths:
        pytest.fail("bundled sample images not found; install scikit-image")
    return [_centre_crop(load_image(p).y, 96) for p in paths]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_lines(request):
    """Collector for the one-line acceptance verdicts printed at the end."""
    return request.config.__dict__.setdefault("lhsp_acceptance", [])


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "lhsp_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
