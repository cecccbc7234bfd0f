"""
Quantization and entropy models for the codec bottleneck
Rate is estimated from learned likelihoods; no bitstream is produced
"""

from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import torch
from compressai.entropy_models import EntropyBottleneck
from compressai.entropy_models import GaussianConditional as _CompressaiGaussianConditional

from .errors import ParameterError

LIKELIHOOD_FLOOR = 1e-9
SCALE_FLOOR = 1e-6
QUANTIZATION_MODES = ("train", "eval", "noise")


def _open_lower_bound(dtype: torch.dtype) -> float:
    """Closest value above -0.5 representable in `dtype`"""
    half = torch.tensor(-0.5, dtype=dtype)
    return float(torch.nextafter(half, torch.zeros_like(half)))


def uniform_noise(like: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """i.i.d. uniform noise on (-0.5, 0.5) shaped like `like`"""
    noise = torch.rand(like.shape, generator=generator, dtype=like.dtype, device=like.device) - 0.5
    return noise.clamp_(min=_open_lower_bound(like.dtype))


def round_half_away(z: torch.Tensor) -> torch.Tensor:
    return torch.sign(z) * torch.floor(torch.abs(z) + 0.5)


class QuantizationNoise:
    """
    A fixed, seeded draw of additive quantization noise.

    The same key always returns the same tensor, so a loss evaluated twice on
    the same input sees identical noise. Attacks use one instance per run.
    """

    def __init__(self, seed: int = 0, device: Union[str, torch.device] = "cpu"):
        self.seed = int(seed)
        self.generator = torch.Generator(device=device)
        self.generator.manual_seed(self.seed)
        self._draws: Dict[str, torch.Tensor] = {}

    def draw(self, key: str, like: torch.Tensor) -> torch.Tensor:
        cached = self._draws.get(key)
        if cached is None or cached.shape != like.shape:
            cached = uniform_noise(like, generator=self.generator)
            self._draws[key] = cached
        return cached.to(dtype=like.dtype)


def quantize(
    z: torch.Tensor,
    mode: str = "eval",
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    train: z + U(-0.5, 0.5) (fresh draw, or `noise` when given)
    noise: z + the supplied fixed noise tensor
    eval:  round half away from zero
    """
    if mode == "eval":
        return round_half_away(z)
    if mode == "train":
        return z + (noise if noise is not None else uniform_noise(z, generator=generator))
    if mode == "noise":
        if noise is None:
            raise ParameterError("quantize(mode='noise') needs a fixed noise tensor")
        return z + noise
    raise ParameterError(f"Unknown quantization mode: {mode}", allowed=list(QUANTIZATION_MODES))


def rate_bits(likelihoods: Union[torch.Tensor, Iterable[torch.Tensor]]) -> torch.Tensor:
    """Total information content sum(-log2 p) over every element of every tensor"""
    tensors: Sequence[torch.Tensor]
    if isinstance(likelihoods, torch.Tensor):
        tensors = [likelihoods]
    else:
        tensors = list(likelihoods)
    if not tensors:
        raise ParameterError("rate_bits needs at least one likelihood tensor")

    total = None
    for lik in tensors:
        if torch.any(lik <= 0):
            raise ParameterError("Likelihoods must be strictly positive")
        bits = torch.sum(-torch.log2(lik))
        total = bits if total is None else total + bits
    return total


class FactorizedPrior(EntropyBottleneck):
    """
    Per-channel learned density with a monotone cumulative, evaluated on
    already-quantized latents: p(z_hat) = c(z_hat + 0.5) - c(z_hat - 0.5)
    """

    def __init__(self, channels: int, filters: Tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__(channels, filters=tuple(filters), init_scale=init_scale, likelihood_bound=LIKELIHOOD_FLOOR)

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        n, c, h, w = z_hat.shape
        if c != self.channels:
            raise ParameterError(f"Factorized prior has {self.channels} channels, latent has {c}")
        values = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lik = self._likelihood(values)
        # newer compressai releases also return the cumulative logits
        if isinstance(lik, tuple):
            lik = lik[0]
        lik = lik.reshape(c, n, h, w).permute(1, 0, 2, 3)
        return self.likelihood_lower_bound(lik)


class GaussianConditional(_CompressaiGaussianConditional):
    """Zero-mean Gaussian with per-element scale from the hyper-decoder"""

    def __init__(self, scale_floor: float = SCALE_FLOOR):
        super().__init__(None, scale_bound=scale_floor, likelihood_bound=LIKELIHOOD_FLOOR)
        self.scale_floor = float(scale_floor)

    def likelihood(self, z_hat: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
        if scales.shape != z_hat.shape:
            raise ParameterError(
                "Gaussian scales must match the latent shape",
                latent_shape=list(z_hat.shape), scales_shape=list(scales.shape),
            )
        return self.likelihood_lower_bound(self._likelihood(z_hat, scales))
