"""
Building blocks for the analysis/synthesis transforms
GDN / IGDN come from compressai; gdn_forward is the functional form with
explicit parameter checks
"""

from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from compressai.layers import GDN as _CompressaiGDN

from .errors import ParameterError


def gdn_forward(u: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """
    Generalized divisive normalization on an (N, C, H, W) feature map:

        v_i = u_i / sqrt(beta_i + sum_j gamma_ij * u_j ** 2)

    With inverse=True the normalizer multiplies instead (IGDN).
    """
    if u.dim() != 4:
        raise ParameterError(f"GDN expects a 4-D feature map, got shape {tuple(u.shape)}")
    channels = u.shape[1]
    if beta.shape != (channels,) or gamma.shape != (channels, channels):
        raise ParameterError(
            f"GDN parameters do not match {channels} channels",
            beta_shape=list(beta.shape), gamma_shape=list(gamma.shape),
        )
    if torch.any(beta <= 0):
        raise ParameterError("GDN beta must be strictly positive")
    if torch.any(gamma < 0):
        raise ParameterError("GDN gamma must be non-negative")

    norm = F.conv2d(u ** 2, gamma.reshape(channels, channels, 1, 1), beta)
    if inverse:
        return u * torch.sqrt(norm)
    return u * torch.rsqrt(norm)


class GDN(_CompressaiGDN):
    """GDN layer; beta > 0 and gamma >= 0 hold by construction"""

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__(channels, inverse=inverse, beta_min=beta_min, gamma_init=gamma_init)

    def effective_parameters(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.beta_reparam(self.beta), self.gamma_reparam(self.gamma)


def conv(in_channels: int, out_channels: int, kernel_size: int = 5, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(in_channels: int, out_channels: int, kernel_size: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        in_channels,
        out_channels,
        kernel_size,
        stride=stride,
        output_padding=stride - 1,
        padding=kernel_size // 2,
    )
