"""
Desk-scale studies over the codec and its attacks
Recompression, epsilon / quality / distance sweeps, RD curves, targeted demos,
plus the latent and noise-inversion probes. Every study returns an
ExperimentReport (or raw data) and never touches checkpoints on disk.
"""

import io
import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from . import metrics
from .attack import (
    DISTANCE_KINDS,
    QUANTIZATION_SURROGATE,
    AttackResult,
    AttackSpec,
    _masked_mean,
    generate_adversarial,
)
from .codec_core import CodecModel, codec_roundtrip, encode_latents, pad_to_multiple, rd_loss, reconstruct
from .datasets import quantize_8bit
from .entropy_models import QuantizationNoise
from .errors import ParameterError
from .reports import ExperimentReport, Provenance, ReportRow

logger = logging.getLogger(__name__)

DEFAULT_EPSILONS = (1e-5, 1e-4, 1e-3)
DEFAULT_JPEG_QUALITY = 75


@dataclass
class RecompressionStep:
    round: int
    reconstruction: torch.Tensor
    bpp: float
    metrics: metrics.MetricReport


@dataclass
class NoiseInversionResult:
    noise: torch.Tensor
    noise_reconstruction: torch.Tensor
    image_reconstruction: torch.Tensor
    reconstruction_psnr: float  # PSNR(n_hat, x_hat)
    input_psnr: float  # PSNR(n, x)
    loss_trace: List[float]
    noise_bpp: float = 0.0


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _on_model(x: torch.Tensor, model: CodecModel) -> torch.Tensor:
    param = next(model.parameters())
    return _batched(x).to(device=param.device, dtype=param.dtype)


def _provenance(spec: Optional[AttackSpec] = None, **notes: str) -> Provenance:
    notes = {"quantization_surrogate": QUANTIZATION_SURROGATE, **notes}
    if spec is None:
        return Provenance(notes=notes)
    return Provenance(spec=spec.model_dump(), seeds={"attack": spec.seed}, notes=notes)


def _clean_row(x, model, image_id, model_id, tags) -> ReportRow:
    start = time.perf_counter()
    x_hat, bits_per_pixel = codec_roundtrip(x, model)
    report = metrics.metric_report(x, x_hat, bits_per_pixel)
    return ReportRow.from_metrics(
        report, image_id, model_id, "clean", tags=tags, wall_time_s=time.perf_counter() - start
    )


def _attacked_row(x, model, spec, image_id, model_id, tags, extra=None) -> Tuple[ReportRow, AttackResult]:
    start = time.perf_counter()
    result = generate_adversarial(x, model, spec)
    extra = {
        "input_psnr_db": metrics.report_psnr(result.input_psnr),
        "quantized_psnr_db": metrics.report_psnr(result.quantized_metrics.psnr_db),
        **(extra or {}),
    }
    row = ReportRow.from_metrics(
        result.metrics, image_id, model_id, "attacked", tags=tags,
        budget_satisfied=result.budget_satisfied,
        wall_time_s=time.perf_counter() - start,
        extra=extra,
    )
    return row, result


def recompress(
    x: torch.Tensor,
    model: CodecModel,
    rounds: int,
    float_chain: bool = False,
) -> List[RecompressionStep]:
    """
    Feed each reconstruction back into the codec `rounds` times. Between rounds
    the reconstruction is quantized to 8 bits unless float_chain is set.
    Metrics are always against the original x.
    """
    if rounds < 1:
        raise ParameterError(f"rounds must be at least 1, got {rounds}")
    x = _on_model(x, model)
    steps: List[RecompressionStep] = []
    current = x
    for index in range(1, rounds + 1):
        x_hat, bits_per_pixel = codec_roundtrip(current, model)
        steps.append(RecompressionStep(index, x_hat, bits_per_pixel, metrics.metric_report(x, x_hat, bits_per_pixel)))
        current = x_hat if float_chain else quantize_8bit(x_hat)
    return steps


def _jpeg_roundtrip(image: torch.Tensor, quality: int) -> Tuple[torch.Tensor, int]:
    """(C, H, W) in [0, 1] -> decoded JPEG and its size in bytes"""
    array = (quantize_8bit(image.detach().cpu().float()) * 255).round().to(torch.uint8).numpy().transpose(1, 2, 0)
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="JPEG", quality=quality)
    size = buffer.tell()
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        out = np.asarray(decoded.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(np.ascontiguousarray(out)).to(image.dtype), size


def jpeg_recompress(x: torch.Tensor, rounds: int, quality: int = DEFAULT_JPEG_QUALITY) -> List[RecompressionStep]:
    """Classical baseline for the recompression study"""
    if rounds < 1:
        raise ParameterError(f"rounds must be at least 1, got {rounds}")
    x = _batched(x)
    height, width = x.shape[-2:]
    steps: List[RecompressionStep] = []
    current = x
    for index in range(1, rounds + 1):
        decoded, total_bits = [], 0
        for sample in current:
            out, size = _jpeg_roundtrip(sample, quality)
            decoded.append(out)
            total_bits += size * 8
        x_hat = torch.stack(decoded).to(x.device)
        bits_per_pixel = metrics.bpp(total_bits, height, width) / x.shape[0]
        steps.append(RecompressionStep(index, x_hat, bits_per_pixel, metrics.metric_report(x, x_hat, bits_per_pixel)))
        current = x_hat
    return steps


def recompression_study(
    x: torch.Tensor,
    models: Dict[str, CodecModel],
    rounds: int = 50,
    image_id: str = "image",
    include_jpeg: bool = True,
    jpeg_quality: int = DEFAULT_JPEG_QUALITY,
    float_chain: bool = False,
    report: Optional[ExperimentReport] = None,
) -> ExperimentReport:
    """One row per (model, round), plus JPEG rows when enabled"""
    report = report or ExperimentReport(
        experiment_id="recompression",
        provenance=_provenance(rounds=str(rounds), jpeg_quality=str(jpeg_quality), float_chain=str(float_chain)),
    )
    runs = {}
    for model_id, model in models.items():
        runs[model_id] = (recompress(x, model, rounds, float_chain=float_chain), {"lmbda": model.lmbda})
    if include_jpeg:
        runs["jpeg"] = (jpeg_recompress(x, rounds, jpeg_quality), {"quality": jpeg_quality})

    for model_id, (steps, tags) in runs.items():
        for step in steps:
            report.append_row(ReportRow.from_metrics(
                step.metrics, image_id, model_id, "recompressed", tags={**tags, "round": step.round}
            ))
        logger.info(
            f"{model_id}: PSNR after round 1 {steps[0].metrics.psnr_db:.2f} dB, "
            f"after round {rounds} {steps[-1].metrics.psnr_db:.2f} dB"
        )
    return report


def epsilon_sweep(
    x: torch.Tensor,
    model: CodecModel,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    spec: Optional[AttackSpec] = None,
    image_id: str = "image",
    model_id: str = "model",
    report: Optional[ExperimentReport] = None,
) -> ExperimentReport:
    """One clean row and one attacked row per epsilon, same seed throughout"""
    if not epsilons or any(eps <= 0 for eps in epsilons):
        raise ParameterError(f"All epsilons must be positive, got {list(epsilons)}")
    spec = spec or AttackSpec()
    x = _on_model(x, model)
    report = report or ExperimentReport(experiment_id="epsilon_sweep", provenance=_provenance(spec))

    report.append_row(_clean_row(x, model, image_id, model_id, {"lmbda": model.lmbda}))
    for epsilon in epsilons:
        row, _ = _attacked_row(
            x, model, spec.model_copy(update={"epsilon": float(epsilon)}),
            image_id, model_id, {"lmbda": model.lmbda, "epsilon": float(epsilon)},
        )
        report.append_row(row)
    return report


def quality_sweep(
    x: torch.Tensor,
    models: Sequence[CodecModel],
    spec: Optional[AttackSpec] = None,
    image_id: str = "image",
    model_ids: Optional[Sequence[str]] = None,
    report: Optional[ExperimentReport] = None,
) -> ExperimentReport:
    """Clean and attacked rows for each quality scale"""
    if len(models) < 2:
        raise ParameterError(f"A quality sweep needs at least two models, got {len(models)}")
    spec = spec or AttackSpec()
    model_ids = list(model_ids or [f"lmbda{m.lmbda:g}" for m in models])
    report = report or ExperimentReport(experiment_id="quality_sweep", provenance=_provenance(spec))

    for model_id, model in zip(model_ids, models):
        sample = _on_model(x, model)
        tags = {"lmbda": model.lmbda}
        report.append_row(_clean_row(sample, model, image_id, model_id, tags))
        row, _ = _attacked_row(sample, model, spec, image_id, model_id, tags)
        report.append_row(row)
    return report


def distance_ablation(
    x: torch.Tensor,
    model: CodecModel,
    spec: Optional[AttackSpec] = None,
    kinds: Sequence[str] = DISTANCE_KINDS,
    image_id: str = "image",
    model_id: str = "model",
    report: Optional[ExperimentReport] = None,
) -> ExperimentReport:
    """Untargeted attacks at a fixed epsilon with each distance measure"""
    spec = spec or AttackSpec()
    x = _on_model(x, model)
    report = report or ExperimentReport(experiment_id="distance_ablation", provenance=_provenance(spec))
    for kind in kinds:
        row, _ = _attacked_row(
            x, model, spec.model_copy(update={"distance_kind": kind, "mode": "untargeted"}),
            image_id, model_id, {"lmbda": model.lmbda, "distance": kind},
        )
        report.append_row(row)
    return report


def rd_curve(
    families: Dict[str, Sequence[CodecModel]],
    eval_set: Sequence[torch.Tensor],
    report: Optional[ExperimentReport] = None,
) -> ExperimentReport:
    """
    Mean (bpp, PSNR, MS-SSIM) over the eval set per model, for each model
    family. The mean rate-distortion loss in training units is kept in
    extra["rd_loss"].
    """
    if not eval_set:
        raise ParameterError("rd_curve needs at least one evaluation image")
    report = report or ExperimentReport(experiment_id="rd_curve", provenance=_provenance())
    for family, models in families.items():
        for model in models:
            start = time.perf_counter()
            reports, losses = [], []
            for x in eval_set:
                x = _on_model(x, model)
                x_hat, bits_per_pixel = codec_roundtrip(x, model)
                point = metrics.metric_report(x, x_hat, bits_per_pixel)
                reports.append(point)
                if model.distortion == "mse":
                    losses.append(point.bpp + model.lmbda * point.mse)
                else:
                    losses.append(point.bpp + model.lmbda * (1.0 - point.ms_ssim))
            report.append_row(ReportRow(
                image_id="mean",
                model_id=f"{family}_lmbda{model.lmbda:g}",
                condition="clean",
                tags={"family": family, "lmbda": model.lmbda, "images": len(reports)},
                bpp=float(np.mean([r.bpp for r in reports])),
                psnr_db=float(np.mean([metrics.report_psnr(r.psnr_db) for r in reports])),
                ms_ssim=float(np.mean([r.ms_ssim for r in reports])),
                mse=float(np.mean([r.mse for r in reports])),
                wall_time_s=time.perf_counter() - start,
                extra={"rd_loss": float(np.mean(losses))},
            ))
    return report


def rd_points(report: ExperimentReport, family: str) -> List[Tuple[float, float]]:
    """(bpp, PSNR) pairs of one family sorted by rate"""
    return sorted((row.bpp, row.psnr_db) for row in report.select(family=family))


def targeted_demo(
    x: torch.Tensor,
    x_target: torch.Tensor,
    model: CodecModel,
    spec: AttackSpec,
    image_id: str = "source",
    model_id: str = "model",
    report: Optional[ExperimentReport] = None,
) -> Tuple[AttackResult, ExperimentReport]:
    """
    Targeted or masked-targeted attack; rows record the reconstruction's mean
    squared distance to the target's reconstruction and to the clean one
    """
    if spec.mode == "untargeted":
        raise ParameterError("targeted_demo needs a targeted or masked_targeted spec")
    x = _on_model(x, model)
    x_target = _on_model(x_target, model)
    spec = spec.model_copy(update={"target": x_target})
    report = report or ExperimentReport(experiment_id="targeted_demo", provenance=_provenance(spec))

    target_hat, _ = codec_roundtrip(x_target, model)
    tags = {"lmbda": model.lmbda, "mode": spec.mode, "lambda_bkg": spec.lambda_bkg}
    report.append_row(_clean_row(x, model, image_id, model_id, tags))

    start = time.perf_counter()
    result = generate_adversarial(x, model, spec)
    adv_hat = result.adv_reconstruction
    extra = {
        "input_psnr_db": metrics.report_psnr(result.input_psnr),
        "distance_to_target": float(metrics.mse(adv_hat, target_hat)),
        "distance_to_source": float(metrics.mse(adv_hat, result.original_reconstruction)),
        "clean_distance_to_target": float(metrics.mse(result.original_reconstruction, target_hat)),
    }
    if spec.mode == "masked_targeted":
        roi = spec.mask.to(device=x.device, dtype=x.dtype)
        extra["roi_distance_to_target"] = float(_masked_mean((adv_hat - target_hat) ** 2, roi).mean())
        extra["background_distance_to_source"] = float(
            _masked_mean((adv_hat - result.original_reconstruction) ** 2, 1.0 - roi).mean()
        )
    report.append_row(ReportRow.from_metrics(
        result.metrics, image_id, model_id, "attacked", tags=tags,
        budget_satisfied=result.budget_satisfied,
        wall_time_s=time.perf_counter() - start,
        extra=extra,
    ))
    logger.info(
        f"Targeted demo: distance to target {extra['distance_to_target']:.5f}, "
        f"to source reconstruction {extra['distance_to_source']:.5f}"
    )
    return result, report


def mask_weight_comparison(
    x: torch.Tensor,
    x_target: torch.Tensor,
    mask: torch.Tensor,
    model: CodecModel,
    spec: Optional[AttackSpec] = None,
    weights: Sequence[float] = (0.1, math.inf),
    image_id: str = "source",
    model_id: str = "model",
) -> ExperimentReport:
    """Masked targeted attacks at several background weights, equal ROI budget"""
    spec = spec or AttackSpec()
    report = ExperimentReport(experiment_id="mask_weight_comparison", provenance=_provenance())
    for weight in weights:
        weighted = AttackSpec(
            **{**spec.model_dump(), "mode": "masked_targeted", "lambda_bkg": float(weight)},
            target=_on_model(x_target, model),
            mask=mask,
        )
        targeted_demo(x, x_target, model, weighted, image_id=image_id, model_id=model_id, report=report)
    return report


def noise_inversion_probe(
    x: torch.Tensor,
    model: CodecModel,
    steps: int = 1000,
    learning_rate: float = 1e-2,
    seed: int = 0,
) -> NoiseInversionResult:
    """
    Start from uniform random noise n and minimise the mean squared distance
    between its reconstruction and the reconstruction of x. A small
    reconstruction distance with a large input distance shows that very
    different inputs share a reconstruction.
    """
    x = _on_model(x, model)
    generator = torch.Generator(device=x.device)
    generator.manual_seed(seed)
    quantization_noise = QuantizationNoise(seed=seed + 1, device=x.device)

    with torch.no_grad():
        x_hat_surrogate, _ = reconstruct(x, model, quantization="noise", noise=quantization_noise)
    n = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device).requires_grad_(True)
    optimizer = torch.optim.Adam([n], lr=learning_rate)
    trace: List[float] = []
    for _ in range(steps):
        n_hat, _ = reconstruct(n, model, quantization="noise", noise=quantization_noise)
        loss = metrics.mse(n_hat, x_hat_surrogate)
        (grad,) = torch.autograd.grad(loss, n)
        n.grad = grad
        optimizer.step()
        with torch.no_grad():
            n.clamp_(0.0, 1.0)
        trace.append(float(loss.detach()))

    noise = n.detach()
    noise_hat, noise_bpp = codec_roundtrip(noise, model)
    image_hat, _ = codec_roundtrip(x, model)
    result = NoiseInversionResult(
        noise=noise,
        noise_reconstruction=noise_hat,
        image_reconstruction=image_hat,
        reconstruction_psnr=metrics.psnr(noise_hat, image_hat),
        input_psnr=metrics.psnr(noise, x),
        loss_trace=trace,
        noise_bpp=noise_bpp,
    )
    logger.info(
        f"Noise inversion: PSNR(n_hat, x_hat) {result.reconstruction_psnr:.2f} dB, "
        f"PSNR(n, x) {result.input_psnr:.2f} dB"
    )
    return result


@torch.no_grad()
def latent_histograms(
    x: torch.Tensor,
    x_adv: torch.Tensor,
    model: CodecModel,
    channels: Optional[Sequence[int]] = None,
    bins: int = 64,
) -> Dict[str, object]:
    """Per-channel histograms of the quantized latents of x and x_adv (raw counts)"""
    x, x_adv = _on_model(x, model), _on_model(x_adv, model)
    clean = encode_latents(pad_to_multiple(x, model.downsampling_factor)[0], model).z_hat
    adversarial = encode_latents(pad_to_multiple(x_adv, model.downsampling_factor)[0], model).z_hat
    channels = list(channels) if channels is not None else list(range(clean.shape[1]))
    for c in channels:
        if not 0 <= c < clean.shape[1]:
            raise ParameterError(f"Latent channel {c} out of range 0..{clean.shape[1] - 1}")

    low = float(torch.minimum(clean.min(), adversarial.min()))
    high = float(torch.maximum(clean.max(), adversarial.max()))
    if high <= low:
        high = low + 1.0
    edges = np.linspace(low, high, bins + 1)
    histograms = {}
    for c in channels:
        clean_counts, _ = np.histogram(clean[:, c].cpu().numpy().ravel(), bins=edges)
        adv_counts, _ = np.histogram(adversarial[:, c].cpu().numpy().ravel(), bins=edges)
        histograms[str(c)] = {"clean": clean_counts.tolist(), "adversarial": adv_counts.tolist()}
    return {"bin_edges": edges.tolist(), "channels": histograms}


def mean_rd_loss(model: CodecModel, eval_set: Sequence[torch.Tensor]) -> float:
    """Mean hard-rounding rate-distortion loss over an image set"""
    values = []
    with torch.no_grad():
        for x in eval_set:
            values.append(float(rd_loss(_on_model(x, model), model, quantization="eval").loss))
    return float(np.mean(values))
