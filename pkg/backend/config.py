"""
Configuration for the toolkit
Environment settings (read after loading .env) and the per-command run configs
"""

import json
import logging
import math
import os
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

import torch
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

load_dotenv()

DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
RUN_CONFIG_FILE = "run_config.json"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class EnvironmentConfig:
    """Settings taken from the environment"""

    OUTPUT_ROOT: str = os.getenv("NICGUARD_OUTPUT_ROOT", "outputs")
    DEVICE: str = os.getenv("NICGUARD_DEVICE", "cpu")
    PRECISION: str = os.getenv("NICGUARD_PRECISION", "float32")
    DATA_DIR: str = os.getenv("NICGUARD_DATA_DIR", "data")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = os.getenv("LOG_FORMAT", DEFAULT_LOG_FORMAT)

    @classmethod
    def overrides(cls) -> Dict[str, str]:
        """Run-config fields set through the environment, read at call time"""
        mapping = {
            "output_dir": "NICGUARD_OUTPUT_ROOT",
            "device": "NICGUARD_DEVICE",
            "precision": "NICGUARD_PRECISION",
        }
        return {field: os.environ[var] for field, var in mapping.items() if os.environ.get(var)}


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or os.getenv("LOG_LEVEL", EnvironmentConfig.LOG_LEVEL)).upper(), logging.INFO),
        format=os.getenv("LOG_FORMAT", EnvironmentConfig.LOG_FORMAT),
    )


def _require_path(value: Optional[str], what: str) -> Optional[str]:
    if value is not None and value != "synthetic" and not os.path.exists(value):
        raise ValueError(f"{what} not found: {value}")
    return value


class CommonConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    output_dir: str = "outputs"
    seed: int = 0
    device: str = "cpu"
    precision: Literal["float32", "float64"] = "float32"

    @field_validator("device")
    @classmethod
    def _device_available(cls, value: str) -> str:
        if value.startswith("cuda") and not torch.cuda.is_available():
            raise ValueError(f"Device {value} requested but CUDA is not available")
        if not (value == "cpu" or value.startswith("cuda")):
            raise ValueError(f"Unsupported device: {value}")
        return value

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]


class DatasetOptions(BaseModel):
    """`synthetic` or a directory of images"""
    dataset: str = "synthetic"
    synthetic_count: int = Field(32, ge=1)
    synthetic_size: int = Field(256, ge=8)

    @field_validator("dataset")
    @classmethod
    def _dataset_exists(cls, value: str) -> str:
        return _require_path(value, "Dataset")


class TrainConfig(CommonConfig, DatasetOptions):
    mode: Literal["factorized", "hyperprior"] = "factorized"
    lmbda: float = Field(1024.0, ge=0)
    distortion: Literal["mse", "ms_ssim"] = "mse"
    channels: int = Field(128, ge=1)
    latent_channels: int = Field(128, ge=1)
    num_stages: int = Field(4, ge=1)
    hyper_channels: Optional[int] = Field(None, ge=1)
    steps: int = Field(10000, ge=0)
    batch_size: int = Field(8, ge=1)
    patch_size: int = Field(256, ge=8)
    learning_rate: float = Field(1e-4, gt=0)
    log_interval: int = Field(100, ge=1)
    checkpoint_interval: int = Field(0, ge=0)


class AttackConfig(CommonConfig):
    checkpoint: str
    image: str
    epsilon: float = Field(1e-3, gt=0)
    steps: int = Field(10000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    distance: Literal["l2", "l1", "ms_ssim"] = "l2"
    init_amplitude: float = Field(1e-2, ge=0)

    @field_validator("checkpoint", "image")
    @classmethod
    def _inputs_exist(cls, value: str) -> str:
        return _require_path(value, "Input")


class FinetuneConfig(CommonConfig, DatasetOptions):
    checkpoint: str
    iterations: int = Field(1000, ge=0)
    attack_steps: int = Field(1000, ge=0)
    batch_size: int = Field(8, ge=1)
    clean_fraction: float = Field(0.5, ge=0, le=1)
    lmbda: Optional[float] = Field(None, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    epsilon: float = Field(1e-3, gt=0)
    attack_learning_rate: float = Field(1e-3, gt=0)
    patch_size: int = Field(256, ge=8)
    checkpoint_interval: int = Field(100, ge=0)

    @field_validator("checkpoint")
    @classmethod
    def _checkpoint_exists(cls, value: str) -> str:
        return _require_path(value, "Checkpoint")


class RecompressConfig(CommonConfig):
    checkpoints: List[str] = Field(min_length=1)
    image: str
    rounds: int = Field(50, ge=1)
    float_chain: bool = False
    jpeg: bool = True
    jpeg_quality: int = Field(75, ge=1, le=95)
    plot: bool = False

    @field_validator("checkpoints")
    @classmethod
    def _checkpoints_exist(cls, value: List[str]) -> List[str]:
        return [_require_path(path, "Checkpoint") for path in value]

    @field_validator("image")
    @classmethod
    def _image_exists(cls, value: str) -> str:
        return _require_path(value, "Image")


class EvalConfig(CommonConfig):
    baseline: str
    finetuned: str
    eval_dir: str
    limit: Optional[int] = Field(None, ge=1)
    epsilon: float = Field(1e-3, gt=0)
    steps: int = Field(10000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    distance: Literal["l2", "l1", "ms_ssim"] = "l2"

    @field_validator("baseline", "finetuned", "eval_dir")
    @classmethod
    def _inputs_exist(cls, value: str) -> str:
        return _require_path(value, "Input")


class RDCurveConfig(CommonConfig):
    baseline: List[str] = Field(min_length=1)
    finetuned: List[str] = Field(default_factory=list)
    eval_dir: str
    limit: Optional[int] = Field(None, ge=1)
    plot: bool = False

    @field_validator("baseline", "finetuned")
    @classmethod
    def _checkpoints_exist(cls, value: List[str]) -> List[str]:
        return [_require_path(path, "Checkpoint") for path in value]

    @field_validator("eval_dir")
    @classmethod
    def _eval_dir_exists(cls, value: str) -> str:
        return _require_path(value, "Evaluation directory")


class SweepConfig(CommonConfig):
    kind: Literal["epsilon", "quality", "distance"] = "epsilon"
    checkpoints: List[str] = Field(min_length=1)
    image: str
    epsilons: List[float] = Field(default_factory=lambda: [1e-5, 1e-4, 1e-3])
    epsilon: float = Field(1e-3, gt=0)
    steps: int = Field(10000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    distance: Literal["l2", "l1", "ms_ssim"] = "l2"

    @field_validator("checkpoints")
    @classmethod
    def _checkpoints_exist(cls, value: List[str]) -> List[str]:
        return [_require_path(path, "Checkpoint") for path in value]

    @field_validator("image")
    @classmethod
    def _image_exists(cls, value: str) -> str:
        return _require_path(value, "Image")

    @field_validator("epsilons")
    @classmethod
    def _positive(cls, value: List[float]) -> List[float]:
        if not value or any(eps <= 0 for eps in value):
            raise ValueError("epsilons must be a non-empty list of positive values")
        return value

    @model_validator(mode="after")
    def _enough_models(self) -> "SweepConfig":
        if self.kind == "quality" and len(self.checkpoints) < 2:
            raise ValueError("A quality sweep needs at least two checkpoints")
        return self


class TargetedConfig(CommonConfig):
    checkpoint: str
    image: str
    target: str
    mask: Optional[str] = None
    lambda_bkg: float = Field(0.1, ge=0)
    epsilon: float = Field(1e-3, gt=0)
    steps: int = Field(10000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    compare_weights: bool = False

    @field_validator("checkpoint", "image", "target", "mask")
    @classmethod
    def _inputs_exist(cls, value: Optional[str]) -> Optional[str]:
        return _require_path(value, "Input")


class InspectConfig(CommonConfig):
    """noise-inversion starts from random noise; latent-histograms attacks the image first"""
    kind: Literal["noise-inversion", "latent-histograms"] = "noise-inversion"
    checkpoint: str
    image: str
    steps: int = Field(1000, ge=0)
    learning_rate: Optional[float] = Field(None, gt=0)
    epsilon: float = Field(1e-3, gt=0)
    channels: Optional[List[int]] = None
    bins: int = Field(64, ge=1)

    @field_validator("checkpoint", "image")
    @classmethod
    def _inputs_exist(cls, value: str) -> str:
        return _require_path(value, "Input")


ConfigT = TypeVar("ConfigT", bound=CommonConfig)


def resolve_config(
    config_cls: Type[ConfigT],
    config_file: Optional[str] = None,
    cli_values: Optional[Dict[str, Any]] = None,
) -> ConfigT:
    """defaults < JSON config file < environment < explicit CLI flags"""
    values: Dict[str, Any] = {}
    if config_file:
        try:
            with open(config_file, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {config_file}: {e}", path=config_file)
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {config_file} must hold a JSON object", path=config_file)
        values.update(loaded)
    values.update(EnvironmentConfig.overrides())
    values.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    try:
        return config_cls(**values)
    except ValidationError as e:
        errors = [
            {"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
            for err in e.errors()
        ]
        raise ConfigError(f"Invalid {config_cls.__name__}", errors=errors)


def _json_value(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_run_config(config: CommonConfig, run_dir: str, command: str) -> str:
    """Fully resolved configuration next to the run outputs"""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, RUN_CONFIG_FILE)
    payload = {k: _json_value(v) for k, v in config.model_dump().items()}
    payload["command"] = command
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    return path
