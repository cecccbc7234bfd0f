import logging
import math

import pytest
import pytorch_msssim
import torch
from pydantic import ValidationError

from backend import metrics
from backend.errors import GeometryError, ParameterError


def test_psnr_anchor():
    assert metrics.psnr_from_mse(1e-3) == pytest.approx(30.0, abs=1e-12)
    assert metrics.psnr_from_mse(1e-2) == pytest.approx(20.0, abs=1e-12)


def test_psnr_identical_images():
    x = torch.rand(1, 3, 8, 8)
    assert math.isinf(metrics.psnr(x, x))
    assert metrics.report_psnr(metrics.psnr(x, x)) == metrics.PSNR_SENTINEL_DB
    assert metrics.report_psnr(25.0) == 25.0


def test_psnr_known_value():
    a = torch.zeros(1, 3, 4, 4)
    b = torch.full((1, 3, 4, 4), 0.1)
    assert metrics.psnr(a, b) == pytest.approx(20.0, abs=1e-5)


def test_mse_per_sample():
    a = torch.zeros(2, 1, 2, 2)
    b = torch.stack([torch.full((1, 2, 2), 1.0), torch.full((1, 2, 2), 2.0)])
    assert torch.equal(metrics.mse(a, b, reduction="none"), torch.tensor([1.0, 4.0]))
    assert float(metrics.mse(a, b)) == pytest.approx(2.5)
    with pytest.raises(GeometryError):
        metrics.mse(a, torch.zeros(1, 1, 2, 2))


def test_bpp():
    assert metrics.bpp(1024, 16, 16) == 4.0
    with pytest.raises(ParameterError):
        metrics.bpp(10, 0, 5)


@pytest.mark.parametrize("size, expected", [
    ((176, 176), (5, 11)),
    ((256, 192), (5, 11)),
    ((100, 100), (4, 11)),
    ((32, 40), (2, 11)),
    ((8, 8), (1, 7)),
    ((4, 6), (1, 3)),
])
def test_ms_ssim_geometry(size, expected):
    assert metrics.ms_ssim_geometry(*size) == expected


def test_ms_ssim_identical_is_one():
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    assert torch.allclose(metrics.ms_ssim(x, x), torch.tensor(1.0, dtype=torch.float64))
    assert metrics.ms_ssim(x, x, reduction="none").shape == (2,)


def test_ms_ssim_small_image_warns_once(caplog):
    metrics._warn_reduced_scales.cache_clear()
    a = torch.rand(1, 3, 40, 40, dtype=torch.float64)
    b = (a + 0.05 * torch.randn_like(a)).clamp(0, 1)
    with caplog.at_level(logging.WARNING, logger="backend.metrics"):
        value = float(metrics.ms_ssim(a, b))
        metrics.ms_ssim(a, b)
    assert 0 < value < 1
    warnings = [r for r in caplog.records if "MS-SSIM" in r.getMessage()]
    assert len(warnings) == 1


def test_ms_ssim_rejects_unbatched():
    with pytest.raises(GeometryError):
        metrics.ms_ssim(torch.rand(3, 32, 32), torch.rand(3, 32, 32))


def test_multiscale_matches_reference_implementation():
    for seed in range(10):
        generator = torch.Generator().manual_seed(seed)
        a = torch.rand(1, 3, 192, 192, generator=generator, dtype=torch.float64)
        noise = torch.randn(1, 3, 192, 192, generator=generator, dtype=torch.float64)
        b = (a + 0.1 * noise).clamp(0, 1)
        reference = float(pytorch_msssim.ms_ssim(a, b, data_range=1.0, size_average=True))
        assert float(metrics._multiscale(a, b, 5, 11).mean()) == pytest.approx(reference, abs=1e-4)
        assert float(metrics.ms_ssim(a, b)) == pytest.approx(reference, abs=1e-12)


def test_ms_ssim_is_differentiable():
    a = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    b = (a + 0.05).clamp(0, 1).requires_grad_(True)
    (1 - metrics.ms_ssim(a, b)).backward()
    assert torch.isfinite(b.grad).all()


def test_metric_report_validation():
    x = torch.rand(1, 3, 16, 16)
    report = metrics.metric_report(x, x, 0.5)
    assert math.isinf(report.psnr_db)
    assert report.ms_ssim == pytest.approx(1.0)
    assert report.mse == 0.0
    with pytest.raises(ValidationError):
        metrics.MetricReport(psnr_db=30.0, ms_ssim=1.5, mse=0.0, bpp=0.1)
    with pytest.raises(ValidationError):
        metrics.MetricReport(psnr_db=30.0, ms_ssim=0.5, mse=-1.0, bpp=0.1)
