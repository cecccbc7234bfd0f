"""
Baseline codec training
Adam on the rate-distortion loss over seeded random patches
"""

import json
import logging
import os
from typing import Optional

import torch
from tqdm import tqdm

from .checkpoints import save_checkpoint
from .codec_core import CodecModel, rd_loss
from .config import TrainConfig
from .datasets import PatchSampler, load_dataset
from .errors import TrainingDivergedError

logger = logging.getLogger(__name__)

TRAIN_LOG = "train_log.jsonl"


def build_model(config: TrainConfig) -> CodecModel:
    torch.manual_seed(config.seed)
    model = CodecModel(
        channels=config.channels,
        latent_channels=config.latent_channels,
        mode=config.mode,
        lmbda=config.lmbda,
        distortion=config.distortion,
        num_stages=config.num_stages,
        hyper_channels=config.hyper_channels,
    )
    return model.to(device=config.device, dtype=config.dtype)


def fit(
    model: CodecModel,
    sampler: PatchSampler,
    steps: int,
    batch_size: int,
    learning_rate: float,
    seed: int = 0,
    log_path: Optional[str] = None,
    log_interval: int = 100,
    checkpoint_dir: Optional[str] = None,
    checkpoint_interval: int = 0,
    progress: bool = False,
) -> CodecModel:
    """Train `model` in place for `steps` Adam steps"""
    param = next(model.parameters())
    generator = torch.Generator(device=param.device)
    generator.manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)

    model.train()
    for step in tqdm(range(steps), desc="train", disable=not progress):
        batch = sampler.sample(batch_size).to(device=param.device, dtype=param.dtype)
        optimizer.zero_grad()
        out = rd_loss(batch, model, quantization="train", generator=generator)
        if not torch.isfinite(out.loss):
            raise TrainingDivergedError(
                f"Non-finite training loss at step {step}",
                step=step,
                loss=float(out.loss),
                rate=float(out.rate),
                distortion=float(out.distortion),
                learning_rate=learning_rate,
            )
        out.loss.backward()
        optimizer.step()

        if log_path and (step % log_interval == 0 or step == steps - 1):
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({
                    "step": step,
                    "loss": float(out.loss),
                    "rate": float(out.rate),
                    "distortion": float(out.distortion),
                }, sort_keys=True) + "\n")
        if checkpoint_interval and checkpoint_dir and (step + 1) % checkpoint_interval == 0:
            save_checkpoint(model, checkpoint_dir, step=step + 1)
    model.eval()
    return model


def build_sampler(config: TrainConfig) -> PatchSampler:
    images = load_dataset(config.dataset, config.synthetic_count, config.synthetic_size, seed=config.seed)
    return PatchSampler(images, config.patch_size, seed=config.seed)


def train_baseline(
    config: TrainConfig,
    run_dir: Optional[str] = None,
    progress: bool = False,
    sampler: Optional[PatchSampler] = None,
) -> str:
    """Train a codec from random initialization; returns the final checkpoint path"""
    if sampler is None:
        sampler = build_sampler(config)
    run_dir = run_dir or config.output_dir
    os.makedirs(run_dir, exist_ok=True)
    model = build_model(config)
    logger.info(
        f"Training {config.mode} codec: lambda={config.lmbda:g}, {config.distortion}, "
        f"{config.steps} steps on {len(sampler)} images"
    )
    fit(
        model,
        sampler,
        steps=config.steps,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        seed=config.seed,
        log_path=os.path.join(run_dir, TRAIN_LOG),
        log_interval=config.log_interval,
        checkpoint_dir=run_dir,
        checkpoint_interval=config.checkpoint_interval,
        progress=progress,
    )
    return save_checkpoint(model, run_dir, step=config.steps)
