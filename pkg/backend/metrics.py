"""
Fidelity metrics and rate accounting
MSE, PSNR, MS-SSIM (differentiable) and bits per pixel, intensities in [0, 1]
"""

import logging
import math
from functools import lru_cache
from typing import Tuple

import pytorch_msssim
import torch
import torch.nn.functional as F
from pydantic import BaseModel, field_validator

from .errors import GeometryError, ParameterError

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
PSNR_SENTINEL_DB = 100.0


class MetricReport(BaseModel):
    """Quality of a reconstruction against its reference"""
    psnr_db: float
    ms_ssim: float
    mse: float
    bpp: float

    @field_validator("ms_ssim")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"ms_ssim must lie in [0, 1], got {value}")
        return value

    @field_validator("mse", "bpp")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError(f"value must be non-negative, got {value}")
        return value


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise GeometryError(
            f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}",
            shape_a=list(a.shape), shape_b=list(b.shape),
        )


def _per_sample_mean(t: torch.Tensor) -> torch.Tensor:
    if t.dim() < 2:
        return t.reshape(1, -1).mean(dim=1)
    return t.flatten(1).mean(dim=1)


def mse(a: torch.Tensor, b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check_pair(a, b)
    squared = (a - b) ** 2
    if reduction == "none":
        return _per_sample_mean(squared)
    return squared.mean()


def psnr_from_mse(value: float) -> float:
    if value <= 0:
        return math.inf
    return 10.0 * math.log10(1.0 / value)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(1 / mse); +inf for identical inputs"""
    return psnr_from_mse(float(mse(a, b)))


def report_psnr(value: float) -> float:
    """Tabular form: identical images report the 100 dB sentinel"""
    return PSNR_SENTINEL_DB if math.isinf(value) and value > 0 else value


def bpp(total_bits: float, height: int, width: int) -> float:
    if height <= 0 or width <= 0:
        raise ParameterError(f"Image dimensions must be positive, got {height}x{width}")
    return float(total_bits) / (height * width)


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _gaussian_filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    channels = x.shape[1]
    size = window.numel()
    vertical = window.reshape(1, 1, size, 1).repeat(channels, 1, 1, 1)
    horizontal = window.reshape(1, 1, 1, size).repeat(channels, 1, 1, 1)
    out = F.conv2d(x, vertical, groups=channels)
    return F.conv2d(out, horizontal, groups=channels)


def _ssim_components(a: torch.Tensor, b: torch.Tensor, window: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    c1, c2 = K1 ** 2, K2 ** 2
    mu_a = _gaussian_filter(a, window)
    mu_b = _gaussian_filter(b, window)
    mu_a_sq, mu_b_sq, mu_ab = mu_a ** 2, mu_b ** 2, mu_a * mu_b
    sigma_a_sq = _gaussian_filter(a * a, window) - mu_a_sq
    sigma_b_sq = _gaussian_filter(b * b, window) - mu_b_sq
    sigma_ab = _gaussian_filter(a * b, window) - mu_ab

    cs_map = (2 * sigma_ab + c2) / (sigma_a_sq + sigma_b_sq + c2)
    ssim_map = ((2 * mu_ab + c1) / (mu_a_sq + mu_b_sq + c1)) * cs_map
    # (N, C) per-channel means
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


@lru_cache(maxsize=None)
def _warn_reduced_scales(height: int, width: int, levels: int, window: int) -> None:
    logger.warning(
        f"MS-SSIM on {height}x{width} images uses {levels} scale(s) with a {window}px window "
        f"instead of {len(MS_SSIM_WEIGHTS)} scales"
    )


def ms_ssim_geometry(height: int, width: int) -> Tuple[int, int]:
    """(scale count, window size) usable for an image of the given size"""
    smaller = min(height, width)
    levels = len(MS_SSIM_WEIGHTS)
    while levels > 1 and smaller < WINDOW_SIZE * 2 ** (levels - 1):
        levels -= 1
    window = WINDOW_SIZE if smaller >= WINDOW_SIZE else max(1, smaller - (1 - smaller % 2))
    return levels, window


def _multiscale(a: torch.Tensor, b: torch.Tensor, levels: int, window_size: int) -> torch.Tensor:
    """Per-sample MS-SSIM over `levels` scales, weights renormalized"""
    weights = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    window = _gaussian_window(window_size, WINDOW_SIGMA, a.dtype, a.device)

    contrast_terms = []
    for level in range(levels):
        ssim_per_channel, cs = _ssim_components(a, b, window)
        if level < levels - 1:
            contrast_terms.append(torch.relu(cs))
            padding = [s % 2 for s in a.shape[2:]]
            a = F.avg_pool2d(a, kernel_size=2, padding=padding)
            b = F.avg_pool2d(b, kernel_size=2, padding=padding)
    stacked = torch.stack(contrast_terms + [torch.relu(ssim_per_channel)], dim=0)
    return torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean(dim=1)


def ms_ssim(a: torch.Tensor, b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """
    Multi-scale SSIM with the standard 5-scale weights, 11x11 Gaussian window
    (sigma 1.5), data range 1.0.

    Images smaller than 176 px on the short side use fewer scales (weights
    renormalized) and, below 11 px, a smaller window; a warning is logged.
    """
    _check_pair(a, b)
    if a.dim() != 4:
        raise GeometryError(f"MS-SSIM expects (N, C, H, W) batches, got shape {tuple(a.shape)}")
    height, width = a.shape[-2:]
    levels, window_size = ms_ssim_geometry(height, width)
    if levels == len(MS_SSIM_WEIGHTS) and window_size == WINDOW_SIZE:
        values = pytorch_msssim.ms_ssim(
            a, b, data_range=1.0, size_average=False,
            win_size=WINDOW_SIZE, win_sigma=WINDOW_SIGMA, K=(K1, K2),
        )
    else:
        _warn_reduced_scales(int(height), int(width), levels, window_size)
        values = _multiscale(a, b, levels, window_size)
    if reduction == "none":
        return values
    return values.mean()


@torch.no_grad()
def metric_report(reference: torch.Tensor, reconstruction: torch.Tensor, bits_per_pixel: float) -> MetricReport:
    value = float(mse(reconstruction, reference))
    similarity = float(ms_ssim(reconstruction, reference))
    return MetricReport(
        psnr_db=psnr_from_mse(value),
        ms_ssim=min(max(similarity, 0.0), 1.0),
        mse=value,
        bpp=bits_per_pixel,
    )
