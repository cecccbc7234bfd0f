"""
Adversarial example generation against the codec
Untargeted distortion attack, targeted attack and ROI-masked targeted attack,
all driven by Adam on the additive input noise n
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from . import metrics
from .codec_core import CodecModel, codec_roundtrip, reconstruct
from .datasets import save_float_sidecar, save_image
from .entropy_models import QuantizationNoise
from .errors import AttackSpecError, GeometryError, ParameterError

logger = logging.getLogger(__name__)

DISTANCE_KINDS = ("l2", "l1", "ms_ssim")
ATTACK_MODES = ("untargeted", "targeted", "masked_targeted")
QUANTIZATION_SURROGATE = "additive uniform noise, fixed seeded draw per attack"


class AttackSpec(BaseModel):
    """Noise budget, optimizer settings and attack mode"""
    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    epsilon: float = Field(1e-3, gt=0)
    steps: int = Field(10000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    mode: Literal["untargeted", "targeted", "masked_targeted"] = "untargeted"
    distance_kind: Literal["l2", "l1", "ms_ssim"] = "l2"
    target: Optional[torch.Tensor] = Field(default=None, exclude=True)
    mask: Optional[torch.Tensor] = Field(default=None, exclude=True)
    lambda_bkg: float = Field(0.1, ge=0)
    init_amplitude: float = Field(1e-2, ge=0)
    seed: int = 0

    @field_validator("target")
    @classmethod
    def _batched_target(cls, value: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if value is not None and value.dim() == 3:
            value = value.unsqueeze(0)
        return value

    @field_validator("mask")
    @classmethod
    def _binary_mask(cls, value: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if value is None:
            return value
        while value.dim() < 4:
            value = value.unsqueeze(0)
        if value.shape[0] != 1 or value.shape[1] != 1:
            raise ValueError(f"ROI mask must be a single H x W map, got shape {tuple(value.shape)}")
        value = (value > 0.5).to(torch.get_default_dtype())
        if value.sum() < 1:
            raise ValueError("ROI mask must contain at least one ROI pixel")
        return value

    @model_validator(mode="after")
    def _mode_requirements(self) -> "AttackSpec":
        if self.mode in ("targeted", "masked_targeted") and self.target is None:
            raise ValueError(f"{self.mode} attacks need a target image")
        if self.mode == "masked_targeted" and self.mask is None:
            raise ValueError("masked_targeted attacks need an ROI mask")
        return self

    @property
    def projects_background(self) -> bool:
        return self.mode == "masked_targeted" and math.isinf(self.lambda_bkg)

    def check_against(self, x: torch.Tensor) -> None:
        if self.target is not None and self.mode != "untargeted":
            if self.target.shape[1:] != x.shape[1:]:
                raise AttackSpecError(
                    f"Target shape {tuple(self.target.shape)} does not match image {tuple(x.shape)}"
                )
        if self.mask is not None and self.mode == "masked_targeted":
            if self.mask.shape[-2:] != x.shape[-2:]:
                raise AttackSpecError(
                    f"Mask size {tuple(self.mask.shape[-2:])} does not match image {tuple(x.shape[-2:])}"
                )


@dataclass
class AttackResult:
    noise: torch.Tensor
    adversarial_example: torch.Tensor
    input_psnr: float
    adv_reconstruction: torch.Tensor
    original_reconstruction: torch.Tensor
    metrics: metrics.MetricReport
    original_metrics: metrics.MetricReport
    loss_trace: List[float]
    budget_satisfied: bool
    per_sample_budget: List[bool] = field(default_factory=list)
    # the same adversarial example after 8-bit re-quantization
    quantized_metrics: Optional[metrics.MetricReport] = None
    quantized_input_psnr: Optional[float] = None


def distance(a: torch.Tensor, b: torch.Tensor, kind: str = "l2", reduction: str = "mean") -> torch.Tensor:
    """l2: mean squared difference, l1: mean absolute difference, ms_ssim: 1 - MS-SSIM"""
    if a.shape != b.shape:
        raise GeometryError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if kind == "l2":
        return metrics.mse(a, b, reduction=reduction)
    if kind == "l1":
        diff = torch.abs(a - b)
        return diff.flatten(1).mean(dim=1) if reduction == "none" else diff.mean()
    if kind == "ms_ssim":
        return 1.0 - metrics.ms_ssim(a, b, reduction=reduction)
    raise ParameterError(f"Unknown distance kind: {kind}", allowed=list(DISTANCE_KINDS))


def _masked_mean(t: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-sample mean of t over the elements where weight is 1"""
    weight = weight.expand_as(t)
    count = weight.flatten(1).sum(dim=1)
    total = (t * weight).flatten(1).sum(dim=1)
    return torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))


def noise_power(n: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-sample mean-square noise, over the ROI only when a mask is given"""
    if mask is None:
        return metrics.mse(n, torch.zeros_like(n), reduction="none")
    return _masked_mean(n ** 2, mask)


def _adversarial_input(x: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    return (x + n).clamp(0.0, 1.0)


def _surrogate(x: torch.Tensor, model: CodecModel, noise: QuantizationNoise) -> torch.Tensor:
    x_hat, _ = reconstruct(x, model, quantization="noise", noise=noise, clamp=True)
    return x_hat


def _select(first_branch: torch.Tensor, power: torch.Tensor, second) -> torch.Tensor:
    """Per sample: `power` where the budget is exceeded, else the value of `second()`"""
    if bool(first_branch.all()):
        return power
    return torch.where(first_branch, power, second())


def untargeted_losses(x, n, model, epsilon, distance_kind="l2", noise=None, x_hat=None) -> torch.Tensor:
    noise = noise or QuantizationNoise(seed=0, device=x.device)
    power = noise_power(n)
    first_branch = power >= epsilon

    def reconstruction_damage():
        reference = x_hat
        if reference is None:
            with torch.no_grad():
                reference = _surrogate(x, model, noise)
        adv_hat = _surrogate(_adversarial_input(x, n), model, noise)
        return 1.0 - distance(reference, adv_hat, distance_kind, reduction="none")

    return _select(first_branch, power, reconstruction_damage)


def untargeted_loss(x, n, model, epsilon, distance_kind="l2", noise=None, x_hat=None) -> torch.Tensor:
    """
    ||n||^2                  if ||n||^2 >= epsilon
    1 - d(x_hat, x_hat*)     otherwise
    """
    return untargeted_losses(x, n, model, epsilon, distance_kind, noise, x_hat).sum()


def _target_reconstruction(x_target, model, noise, target_hat):
    if target_hat is not None:
        return target_hat
    if x_target is None:
        raise AttackSpecError("Targeted loss needs a target image")
    with torch.no_grad():
        return _surrogate(x_target, model, noise)


def targeted_losses(x, n, model, x_target, epsilon, noise=None, target_hat=None) -> torch.Tensor:
    noise = noise or QuantizationNoise(seed=0, device=x.device)
    target_hat = _target_reconstruction(x_target, model, noise, target_hat)
    power = noise_power(n)
    first_branch = power >= epsilon

    def target_distance():
        adv_hat = _surrogate(_adversarial_input(x, n), model, noise)
        return metrics.mse(adv_hat, target_hat.expand_as(adv_hat), reduction="none")

    return _select(first_branch, power, target_distance)


def targeted_loss(x, n, model, x_target, epsilon, noise=None, target_hat=None) -> torch.Tensor:
    """
    ||n||^2                      if ||n||^2 >= epsilon
    ||x_hat* - x_hat_target||^2  otherwise
    """
    return targeted_losses(x, n, model, x_target, epsilon, noise, target_hat).sum()


def masked_targeted_losses(x, n, model, x_target, mask, epsilon, lambda_bkg, noise=None, target_hat=None) -> torch.Tensor:
    if mask is None or mask.sum() < 1:
        raise AttackSpecError("Masked targeted loss needs a mask with at least one ROI pixel")
    noise = noise or QuantizationNoise(seed=0, device=x.device)
    target_hat = _target_reconstruction(x_target, model, noise, target_hat)
    roi = mask.to(dtype=x.dtype, device=x.device)
    background = 1.0 - roi
    # infinite weight is enforced by projecting the background noise to zero
    weight = 0.0 if math.isinf(lambda_bkg) else float(lambda_bkg)

    roi_power = noise_power(n, roi)
    first_branch = roi_power >= epsilon
    input_term = roi_power + weight * _masked_mean(n ** 2, background)

    def target_distance():
        adv_hat = _surrogate(_adversarial_input(x, n), model, noise)
        squared = (adv_hat - target_hat.expand_as(adv_hat)) ** 2
        return _masked_mean(squared, roi) + weight * _masked_mean(squared, background)

    return _select(first_branch, input_term, target_distance)


def masked_targeted_loss(x, n, model, x_target, mask, epsilon, lambda_bkg, noise=None, target_hat=None) -> torch.Tensor:
    """
    ||x_roi - x*_roi||^2 + l ||x_bkg - x*_bkg||^2          if ||n_roi||^2 >= epsilon
    ||x_hat*_roi - x_hat_t_roi||^2 + l ||(same)_bkg||^2    otherwise

    ROI and background norms are means over their own pixels.
    """
    return masked_targeted_losses(x, n, model, x_target, mask, epsilon, lambda_bkg, noise, target_hat).sum()


def optimize_noise(
    x: torch.Tensor,
    model: CodecModel,
    spec: AttackSpec,
    progress: bool = False,
) -> Tuple[torch.Tensor, List[float]]:
    """
    Optimize the input noise with Adam for spec.steps steps. After every step
    x + n is clamped to [0, 1] and n is redefined as the clamped difference.
    The model is only read. Returns the final noise and the loss trace.
    """
    x = x.detach()
    spec.check_against(x)
    device, dtype = x.device, x.dtype

    generator = torch.Generator(device=device)
    generator.manual_seed(spec.seed)
    quantization_noise = QuantizationNoise(seed=spec.seed + 1, device=device)
    logger.debug(f"Attack quantization surrogate: {QUANTIZATION_SURROGATE}")

    mask = spec.mask.to(device=device, dtype=dtype) if spec.mask is not None else None
    roi = mask if spec.mode == "masked_targeted" else None

    n0 = (torch.rand(x.shape, generator=generator, dtype=dtype, device=device) * 2 - 1) * spec.init_amplitude
    if spec.projects_background:
        n0 = n0 * roi
    n = (_adversarial_input(x, n0) - x).requires_grad_(True)

    with torch.no_grad():
        x_hat = _surrogate(x, model, quantization_noise)
        target_hat = None
        if spec.mode != "untargeted":
            target = spec.target.to(device=device, dtype=dtype)
            target_hat = _surrogate(target, model, quantization_noise)

    optimizer = torch.optim.Adam([n], lr=spec.learning_rate)
    loss_trace: List[float] = []
    for _ in tqdm(range(spec.steps), desc=f"{spec.mode} attack", disable=not progress):
        if spec.mode == "untargeted":
            loss = untargeted_loss(x, n, model, spec.epsilon, spec.distance_kind, quantization_noise, x_hat)
        elif spec.mode == "targeted":
            loss = targeted_loss(x, n, model, None, spec.epsilon, quantization_noise, target_hat)
        else:
            loss = masked_targeted_loss(
                x, n, model, None, roi, spec.epsilon, spec.lambda_bkg, quantization_noise, target_hat
            )
        (grad,) = torch.autograd.grad(loss, n)
        n.grad = grad
        optimizer.step()
        with torch.no_grad():
            n.copy_(_adversarial_input(x, n) - x)
            if spec.projects_background:
                n.mul_(roi)
        loss_trace.append(float(loss.detach()))

    return n.detach(), loss_trace


def generate_adversarial(
    x: torch.Tensor,
    model: CodecModel,
    spec: AttackSpec,
    progress: bool = False,
) -> AttackResult:
    """
    Run the attack, then evaluate x, x* and the 8-bit x* with the hard-rounding
    round trip.
    """
    x = x.detach()
    noise, loss_trace = optimize_noise(x, model, spec, progress=progress)
    roi = None
    if spec.mode == "masked_targeted":
        roi = spec.mask.to(device=x.device, dtype=x.dtype)
    x_adv = _adversarial_input(x, noise)
    per_sample = (noise_power(noise, roi) < spec.epsilon).tolist()

    original_hat, original_bpp = codec_roundtrip(x, model)
    adv_hat, adv_bpp = codec_roundtrip(x_adv, model)
    x_adv_8bit = torch.round(x_adv * 255.0) / 255.0
    quantized_hat, quantized_bpp = codec_roundtrip(x_adv_8bit, model)

    result = AttackResult(
        noise=noise,
        adversarial_example=x_adv,
        input_psnr=metrics.psnr(x, x_adv),
        adv_reconstruction=adv_hat,
        original_reconstruction=original_hat,
        metrics=metrics.metric_report(x, adv_hat, adv_bpp),
        original_metrics=metrics.metric_report(x, original_hat, original_bpp),
        loss_trace=loss_trace,
        budget_satisfied=all(per_sample),
        per_sample_budget=per_sample,
        quantized_metrics=metrics.metric_report(x, quantized_hat, quantized_bpp),
        quantized_input_psnr=metrics.psnr(x, x_adv_8bit),
    )
    if result.budget_satisfied:
        logger.info(
            f"{spec.mode} attack: input PSNR {result.input_psnr:.2f} dB, reconstruction PSNR "
            f"{result.original_metrics.psnr_db:.2f} -> {result.metrics.psnr_db:.2f} dB"
        )
    else:
        logger.warning(f"{spec.mode} attack ended above the noise budget epsilon={spec.epsilon:g}")
    return result


def export_adversarial(result: AttackResult, out_dir: str, stem: str) -> List[str]:
    """8-bit PNGs of x* and x_hat*, plus the float sidecar of x*"""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for index in range(result.adversarial_example.shape[0]):
        suffix = f"_{index}" if result.adversarial_example.shape[0] > 1 else ""
        adv_path = os.path.join(out_dir, f"{stem}{suffix}_adversarial.png")
        recon_path = os.path.join(out_dir, f"{stem}{suffix}_adv_reconstruction.png")
        sidecar_path = os.path.join(out_dir, f"{stem}{suffix}_adversarial.npy")
        save_image(result.adversarial_example[index], adv_path)
        save_image(result.adv_reconstruction[index], recon_path)
        save_float_sidecar(result.adversarial_example[index], sidecar_path)
        written.extend([adv_path, recon_path, sidecar_path])
    return written
