import math

import numpy as np
import pytest

from lhsp import imaging
from lhsp.metrics import (
    PSNR_SENTINEL,
    EvalRecord,
    EvalReport,
    classical_upscaler,
    evaluate_method,
    psnr,
    ssim,
)
from oracles import naive_mse, naive_ssim


def test_psnr_identical_is_sentinel(rng):
    a = rng.random((8, 8))
    assert psnr(a, a) == PSNR_SENTINEL == 100.0


def test_psnr_uniform_error_is_20db():
    a = np.full((16, 16), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_direct_mse(rng):
    a, b = rng.random((20, 17)), rng.random((20, 17))
    for crop in (0, 2, 3):
        expected = 10 * math.log10(1.0 / naive_mse(a, b, crop))
        assert abs(psnr(a, b, crop) - expected) < 1e-10


def test_psnr_symmetric(rng):
    a, b = rng.random((9, 9)), rng.random((9, 9))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_monotone_in_noise(rng):
    a = rng.random((64, 64))
    noise = rng.standard_normal(a.shape)
    values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_dimension_mismatch():
    with pytest.raises(ValueError, match="differ"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identical_is_one(rng):
    a = rng.random((20, 20))
    assert ssim(a, a) == 1.0


def test_ssim_negative_image(natural_planes):
    a = natural_planes[0][:32, :32]
    assert ssim(a, 1 - a) < 0.5


def test_ssim_matches_direct_window(rng):
    a, b = rng.random((18, 16)), rng.random((18, 16))
    assert abs(ssim(a, b, 2) - naive_ssim(a, b, 2)) < 1e-9
    a2 = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert abs(ssim(a, a2) - naive_ssim(a, a2, 0)) < 1e-9


def test_ssim_symmetric(rng):
    a, b = rng.random((15, 15)), rng.random((15, 15))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_too_small():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((12, 12)), np.zeros((12, 12)), border=1)


@pytest.fixture
def test_dir(tmp_path, natural_planes):
    for i, p in enumerate(natural_planes[:3]):
        imaging.save_image(tmp_path / f"im{i}.png", p[:61, :58])
    return tmp_path


def test_oracle_method(test_dir):
    rep = evaluate_method(test_dir, None, 3, "oracle")
    assert all(r.psnr_db == PSNR_SENTINEL and r.ssim == 1.0 for r in rep.records)


def test_bicubic_report_roundtrip(test_dir):
    rep = evaluate_method(test_dir, classical_upscaler("bicubic"), 2, "bicubic")
    rep.extend(evaluate_method(test_dir, classical_upscaler("bilinear"), 2, "bilinear"))
    again = EvalReport.from_csv(rep.to_csv())
    assert again.aggregates() == rep.aggregates()
    (p, s, n) = rep.aggregates()[("bicubic", 2)]
    assert n == 3 and p == pytest.approx(np.mean([r.psnr_db for r in rep.records[:3]]), abs=1e-12)
    assert p > rep.aggregates()[("bilinear", 2)][0]
    table = rep.table("demo")
    assert "bicubic" in table and "PSNR" in table and "demo" in table


def test_aggregates_are_means():
    rep = EvalReport([EvalRecord("a", 2, "m", 30.0, 0.9), EvalRecord("b", 2, "m", 32.0, 0.8)])
    assert rep.aggregates() == {("m", 2): (31.0, pytest.approx(0.85), 2)}


def test_empty_test_set(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        evaluate_method(tmp_path, classical_upscaler("bicubic"), 2, "bicubic")


def test_missing_test_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate_method(tmp_path / "missing", classical_upscaler("bicubic"), 2, "bicubic")
