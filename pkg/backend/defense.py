"""
Iterative adversarial finetuning
Each iteration attacks the current model, mixes the adversarial examples with
clean patches and takes one rate-distortion step on the mixed batch
"""

import copy
import json
import logging
import math
import os
import time
from typing import List, Optional, Sequence, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from . import metrics
from .attack import QUANTIZATION_SURROGATE, AttackSpec, _adversarial_input, generate_adversarial, optimize_noise
from .checkpoints import check_same_architecture, save_checkpoint
from .codec_core import CodecModel, codec_roundtrip, rd_loss
from .datasets import PatchSampler
from .errors import DatasetError, GeometryError, TrainingDivergedError
from .reports import ExperimentReport, Provenance, ReportRow

logger = logging.getLogger(__name__)

FINETUNE_LOG = "finetune_log.jsonl"


class FinetuneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(1000, ge=0)
    attack_steps: int = Field(1000, ge=0)
    batch_size: int = Field(8, ge=1)
    clean_fraction: float = Field(0.5, ge=0, le=1)
    lmbda: Optional[float] = Field(None, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    epsilon: float = Field(1e-3, gt=0)
    attack_learning_rate: float = Field(1e-3, gt=0)
    patch_size: int = Field(256, ge=1)
    seed: int = 0
    checkpoint_interval: int = Field(0, ge=0)
    checkpoint_dir: Optional[str] = None
    log_interval: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _integer_split(self) -> "FinetuneSpec":
        clean = self.batch_size * self.clean_fraction
        if abs(clean - round(clean)) > 1e-9:
            raise ValueError(
                f"batch_size * clean_fraction must be an integer, got {self.batch_size} * {self.clean_fraction}"
            )
        return self

    @property
    def n_clean(self) -> int:
        return int(round(self.batch_size * self.clean_fraction))

    @property
    def n_adversarial(self) -> int:
        return self.batch_size - self.n_clean

    def inner_attack(self, iteration: int) -> AttackSpec:
        """Cold-start untargeted l2 attack, reseeded per iteration"""
        return AttackSpec(
            epsilon=self.epsilon,
            steps=self.attack_steps,
            learning_rate=self.attack_learning_rate,
            mode="untargeted",
            distance_kind="l2",
            seed=self.seed + 1 + iteration,
        )


def _as_sampler(dataset: Union[PatchSampler, Sequence[torch.Tensor]], spec: FinetuneSpec) -> PatchSampler:
    if isinstance(dataset, PatchSampler):
        return dataset
    if not dataset:
        raise DatasetError("Finetuning dataset is empty")
    return PatchSampler(dataset, spec.patch_size, seed=spec.seed)


def _append_jsonl(path: str, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def adversarial_finetune(
    model: CodecModel,
    dataset: Union[PatchSampler, Sequence[torch.Tensor]],
    spec: FinetuneSpec,
    log_dir: Optional[str] = None,
    progress: bool = False,
) -> CodecModel:
    """
    Finetune a deep copy of `model`; the input model is left untouched.
    Transforms and entropy-model parameters are all updated.
    """
    sampler = _as_sampler(dataset, spec)
    reference = sampler.images[0]
    if reference.shape[1] != model.image_channels:
        raise GeometryError(
            f"Dataset images have {reference.shape[1]} channels, model expects {model.image_channels}"
        )

    finetuned = copy.deepcopy(model)
    if spec.lmbda is not None:
        finetuned.lmbda = float(spec.lmbda)
    param = next(finetuned.parameters())
    device, dtype = param.device, param.dtype

    generator = torch.Generator(device=device)
    generator.manual_seed(spec.seed)
    optimizer = torch.optim.Adam(finetuned.parameters(), lr=spec.learning_rate)

    log_path = os.path.join(log_dir, FINETUNE_LOG) if log_dir else None
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
    logger.info(
        f"Adversarial finetuning: N={spec.iterations}, M={spec.attack_steps}, "
        f"{spec.n_clean} clean + {spec.n_adversarial} adversarial per batch, lambda={finetuned.lmbda:g}"
    )

    for iteration in tqdm(range(spec.iterations), desc="finetune", disable=not progress):
        batch = sampler.sample(spec.batch_size).to(device=device, dtype=dtype)
        clean, to_attack = batch[: spec.n_clean], batch[spec.n_clean:]

        inner_loss = float("nan")
        if to_attack.shape[0] > 0:
            # the attack sees the parameters of this iteration
            finetuned.eval()
            noise, trace = optimize_noise(to_attack, finetuned, spec.inner_attack(iteration))
            adversarial = _adversarial_input(to_attack, noise).detach()
            inner_loss = trace[-1] if trace else float("nan")
        else:
            adversarial = to_attack
        mixed = torch.cat([clean, adversarial], dim=0)

        finetuned.train()
        optimizer.zero_grad()
        out = rd_loss(mixed, finetuned, quantization="train", generator=generator)
        if not torch.isfinite(out.loss):
            raise TrainingDivergedError(
                f"Non-finite finetuning loss at iteration {iteration}",
                iteration=iteration,
                rate=float(out.rate),
                distortion=float(out.distortion),
            )
        out.loss.backward()
        optimizer.step()

        if log_path and (iteration % spec.log_interval == 0 or iteration == spec.iterations - 1):
            _append_jsonl(log_path, {
                "iteration": iteration,
                "inner_attack_loss": None if math.isnan(inner_loss) else inner_loss,
                "loss": float(out.loss),
                "rate": float(out.rate),
                "distortion": float(out.distortion),
                "n_clean": int(clean.shape[0]),
                "n_adv": int(adversarial.shape[0]),
            })
        if spec.checkpoint_interval and spec.checkpoint_dir and (iteration + 1) % spec.checkpoint_interval == 0:
            save_checkpoint(finetuned, spec.checkpoint_dir, step=iteration + 1)

    finetuned.eval()
    return finetuned


def evaluate_defense(
    model_before: CodecModel,
    model_after: CodecModel,
    eval_set: Sequence[torch.Tensor],
    spec: Optional[AttackSpec] = None,
    image_ids: Optional[List[str]] = None,
    model_ids: Sequence[str] = ("baseline", "finetuned"),
    experiment_id: str = "defense_eval",
) -> ExperimentReport:
    """
    Clean and attacked metrics for both models on every image; attacks are
    generated fresh against each model
    """
    check_same_architecture(model_before, model_after)
    spec = spec or AttackSpec()
    if spec.mode != "untargeted":
        logger.warning(f"evaluate_defense runs {spec.mode} attacks; finetuning only covers untargeted ones")
    image_ids = image_ids or [f"image_{i:03d}" for i in range(len(eval_set))]

    report = ExperimentReport(
        experiment_id=experiment_id,
        provenance=Provenance(
            spec=spec.model_dump(),
            seeds={"attack": spec.seed},
            notes={"quantization_surrogate": QUANTIZATION_SURROGATE},
        ),
    )
    for image_id, x in zip(image_ids, eval_set):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        for model_id, model in zip(model_ids, (model_before, model_after)):
            param = next(model.parameters())
            x = x.to(device=param.device, dtype=param.dtype)
            tags = {"lmbda": model.lmbda}

            start = time.perf_counter()
            x_hat, clean_bpp = codec_roundtrip(x, model)
            clean = metrics.metric_report(x, x_hat, clean_bpp)
            report.append_row(ReportRow.from_metrics(
                clean, image_id, model_id, "clean", tags=tags, wall_time_s=time.perf_counter() - start
            ))

            start = time.perf_counter()
            result = generate_adversarial(x, model, spec)
            report.append_row(ReportRow.from_metrics(
                result.metrics, image_id, model_id, "attacked", tags=tags,
                budget_satisfied=result.budget_satisfied,
                wall_time_s=time.perf_counter() - start,
                extra={"input_psnr_db": metrics.report_psnr(result.input_psnr)},
            ))

    summary = report.summary()
    for _, row in summary.iterrows():
        logger.info(
            f"{row['model_id']} / {row['condition']}: bpp {row['bpp']:.4f}, "
            f"PSNR {row['psnr_db']:.2f} dB, MS-SSIM {row['ms_ssim']:.4f}"
        )
    return report
