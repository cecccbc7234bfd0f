"""
Differentiable VAE image codec
Analysis/synthesis transforms with GDN, factorized or scale-hyperprior
entropy model, rate-distortion objective and the eval round trip
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy_models import (
    FactorizedPrior,
    GaussianConditional,
    QuantizationNoise,
    quantize,
    rate_bits,
)
from .errors import EntropyModelModeError, GeometryError, ParameterError
from .layers import GDN, conv, deconv
from . import metrics

logger = logging.getLogger(__name__)

MODES = ("factorized", "hyperprior")
DISTORTIONS = ("mse", "ms_ssim")


@dataclass
class LatentCode:
    """Continuous latent, its quantized value and per-element likelihoods"""
    z: torch.Tensor
    z_hat: torch.Tensor
    likelihoods: torch.Tensor
    hyper: Optional["LatentCode"] = None

    def all_likelihoods(self) -> List[torch.Tensor]:
        tensors = [self.likelihoods]
        if self.hyper is not None:
            tensors.append(self.hyper.likelihoods)
        return tensors


class RDLoss(NamedTuple):
    loss: torch.Tensor
    rate: torch.Tensor
    distortion: torch.Tensor


class CodecModel(nn.Module):
    """
    Encoder f_E (g_a), decoder f_D (g_s) and entropy model.

    Each transform stage is a stride-2 5x5 convolution followed by GDN
    (IGDN on the synthesis side), except the last one.
    """

    def __init__(
        self,
        channels: int = 128,
        latent_channels: int = 128,
        mode: str = "factorized",
        lmbda: float = 1024.0,
        distortion: str = "mse",
        num_stages: int = 4,
        hyper_channels: Optional[int] = None,
        image_channels: int = 3,
    ):
        super().__init__()
        if mode not in MODES:
            raise ParameterError(f"Unknown codec mode: {mode}", allowed=list(MODES))
        if distortion not in DISTORTIONS:
            raise ParameterError(f"Unknown distortion kind: {distortion}", allowed=list(DISTORTIONS))
        if lmbda < 0:
            raise ParameterError(f"lambda must be non-negative, got {lmbda}")
        if num_stages < 1:
            raise ParameterError(f"num_stages must be at least 1, got {num_stages}")

        self.channels = int(channels)
        self.latent_channels = int(latent_channels)
        self.mode = mode
        self.lmbda = float(lmbda)
        self.distortion = distortion
        self.num_stages = int(num_stages)
        self.hyper_channels = int(hyper_channels or channels)
        self.image_channels = int(image_channels)

        analysis: List[nn.Module] = []
        synthesis: List[nn.Module] = []
        for stage in range(self.num_stages):
            last = stage == self.num_stages - 1
            in_ch = self.image_channels if stage == 0 else self.channels
            out_ch = self.latent_channels if last else self.channels
            analysis.append(conv(in_ch, out_ch))
            if not last:
                analysis.append(GDN(out_ch))

            in_ch = self.latent_channels if stage == 0 else self.channels
            out_ch = self.image_channels if last else self.channels
            synthesis.append(deconv(in_ch, out_ch))
            if not last:
                synthesis.append(GDN(out_ch, inverse=True))
        self.g_a = nn.Sequential(*analysis)
        self.g_s = nn.Sequential(*synthesis)

        if self.mode == "hyperprior":
            self.h_a = nn.Sequential(
                conv(self.latent_channels, self.channels, kernel_size=3, stride=1),
                nn.ReLU(),
                conv(self.channels, self.channels),
                nn.ReLU(),
                conv(self.channels, self.hyper_channels),
            )
            self.h_s = nn.Sequential(
                deconv(self.hyper_channels, self.channels),
                nn.ReLU(),
                deconv(self.channels, self.channels),
                nn.ReLU(),
                conv(self.channels, self.latent_channels, kernel_size=3, stride=1),
                nn.ReLU(),
            )
            self.hyper_prior = FactorizedPrior(self.hyper_channels)
            self.gaussian_conditional = GaussianConditional()
        else:
            self.prior = FactorizedPrior(self.latent_channels)

    @property
    def transform_factor(self) -> int:
        return 2 ** self.num_stages

    @property
    def downsampling_factor(self) -> int:
        """Spatial size multiple required by the full pipeline"""
        if self.mode == "hyperprior":
            return self.transform_factor * 4
        return self.transform_factor

    def architecture(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "channels": self.channels,
            "latent_channels": self.latent_channels,
            "num_stages": self.num_stages,
            "hyper_channels": self.hyper_channels,
            "image_channels": self.image_channels,
        }

    def metadata(self) -> Dict[str, Any]:
        meta = self.architecture()
        meta.update({"lmbda": self.lmbda, "distortion": self.distortion})
        return meta


def _check_image(x: torch.Tensor, model: CodecModel, factor: int) -> None:
    if x.dim() != 4:
        raise GeometryError(f"Expected an (N, C, H, W) image batch, got shape {tuple(x.shape)}")
    if x.shape[1] != model.image_channels:
        raise GeometryError(
            f"Model expects {model.image_channels} image channels, got {x.shape[1]}"
        )
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise GeometryError(
            f"Image size {h}x{w} is not a multiple of {factor}; pad before encoding",
            height=int(h), width=int(w), factor=factor,
        )


def analysis_transform(x: torch.Tensor, model: CodecModel) -> torch.Tensor:
    """x (N, C, H, W) -> continuous latent z (N, K, H/f, W/f)"""
    _check_image(x, model, model.transform_factor)
    return model.g_a(x)


def synthesis_transform(z_hat: torch.Tensor, model: CodecModel, clamp: bool = True) -> torch.Tensor:
    """
    Quantized latent -> image. clamp=False exposes the raw output for training
    gradients; evaluation output is clamped to [0, 1].
    """
    if z_hat.dim() != 4 or z_hat.shape[1] != model.latent_channels:
        raise GeometryError(
            f"Latent shape {tuple(z_hat.shape)} does not match {model.latent_channels} latent channels"
        )
    x_hat = model.g_s(z_hat)
    return x_hat.clamp(0.0, 1.0) if clamp else x_hat


def _quantize_with(
    z: torch.Tensor,
    key: str,
    quantization: str,
    noise: Optional[QuantizationNoise],
    generator: Optional[torch.Generator],
) -> torch.Tensor:
    if quantization == "noise":
        if noise is None:
            raise ParameterError("quantization='noise' needs a QuantizationNoise instance")
        return quantize(z, "noise", noise=noise.draw(key, z))
    if quantization == "train" and noise is not None:
        return quantize(z, "train", noise=noise.draw(key, z))
    return quantize(z, quantization, generator=generator)


def likelihoods(
    z_hat: torch.Tensor,
    model: CodecModel,
    hyper_z_hat: Optional[torch.Tensor] = None,
    mode: Optional[str] = None,
) -> torch.Tensor:
    """
    Per-element probability mass of the quantized latent.

    Factorized mode uses the learned per-channel cumulative; hyperprior mode
    needs the quantized hyper-latent to derive the Gaussian scales.
    """
    if mode is not None and mode != model.mode:
        raise EntropyModelModeError(
            f"Likelihoods requested in {mode} mode from a {model.mode} model",
            requested=mode, model_mode=model.mode,
        )
    if model.mode == "factorized":
        return model.prior.likelihood(z_hat)
    if hyper_z_hat is None:
        raise EntropyModelModeError("Hyperprior likelihoods need the quantized hyper-latent")
    scales = model.h_s(hyper_z_hat)
    if scales.shape != z_hat.shape:
        raise GeometryError(
            f"Hyper-decoder scales {tuple(scales.shape)} do not match latent {tuple(z_hat.shape)}"
        )
    return model.gaussian_conditional.likelihood(z_hat, scales)


def encode_latents(
    x: torch.Tensor,
    model: CodecModel,
    quantization: str = "eval",
    noise: Optional[QuantizationNoise] = None,
    generator: Optional[torch.Generator] = None,
) -> LatentCode:
    _check_image(x, model, model.downsampling_factor)
    z = analysis_transform(x, model)
    z_hat = _quantize_with(z, "latent", quantization, noise, generator)

    if model.mode == "factorized":
        return LatentCode(z=z, z_hat=z_hat, likelihoods=likelihoods(z_hat, model))

    y = model.h_a(torch.abs(z))
    y_hat = _quantize_with(y, "hyper_latent", quantization, noise, generator)
    hyper = LatentCode(z=y, z_hat=y_hat, likelihoods=model.hyper_prior.likelihood(y_hat))
    return LatentCode(
        z=z,
        z_hat=z_hat,
        likelihoods=likelihoods(z_hat, model, hyper_z_hat=y_hat),
        hyper=hyper,
    )


def pad_to_multiple(x: torch.Tensor, factor: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad bottom/right to a multiple of `factor`; returns the original size"""
    h, w = x.shape[-2:]
    pad_h = (factor - h % factor) % factor
    pad_w = (factor - w % factor) % factor
    if pad_h == 0 and pad_w == 0:
        return x, (h, w)
    # reflect needs the pad to be smaller than the side
    pad_mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=pad_mode), (h, w)


def crop_to(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    return x[..., : size[0], : size[1]]


def reconstruct(
    x: torch.Tensor,
    model: CodecModel,
    quantization: str = "eval",
    noise: Optional[QuantizationNoise] = None,
    clamp: bool = True,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, LatentCode]:
    """pad -> encode -> decode -> crop; differentiable unless quantization='eval'"""
    padded, size = pad_to_multiple(x, model.downsampling_factor)
    code = encode_latents(padded, model, quantization=quantization, noise=noise, generator=generator)
    x_hat = synthesis_transform(code.z_hat, model, clamp=clamp)
    return crop_to(x_hat, size), code


def rd_loss(
    x: torch.Tensor,
    model: CodecModel,
    distortion_kind: Optional[str] = None,
    quantization: str = "train",
    noise: Optional[QuantizationNoise] = None,
    generator: Optional[torch.Generator] = None,
) -> RDLoss:
    """
    rate + lambda * distortion, rate in bits per pixel, distortion either
    MSE or 1 - MS-SSIM on the unclamped reconstruction
    """
    kind = distortion_kind or model.distortion
    if kind not in DISTORTIONS:
        raise ParameterError(f"Unknown distortion kind: {kind}", allowed=list(DISTORTIONS))

    x_hat, code = reconstruct(x, model, quantization=quantization, noise=noise, clamp=False, generator=generator)
    num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    rate = rate_bits(code.all_likelihoods()) / num_pixels
    if kind == "mse":
        distortion = metrics.mse(x_hat, x)
    else:
        distortion = 1.0 - metrics.ms_ssim(x_hat, x)
    return RDLoss(loss=rate + model.lmbda * distortion, rate=rate, distortion=distortion)


@torch.no_grad()
def codec_roundtrip(x: torch.Tensor, model: CodecModel) -> Tuple[torch.Tensor, float]:
    """Eval-mode f_D(round(f_E(x))), clamped, and bpp over the unpadded pixel count"""
    x_hat, code = reconstruct(x, model, quantization="eval", clamp=True)
    total_bits = float(rate_bits(code.all_likelihoods()))
    return x_hat, metrics.bpp(total_bits, x.shape[-2], x.shape[-1]) / x.shape[0]
