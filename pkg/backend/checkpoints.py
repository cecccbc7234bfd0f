"""
Checkpoint container for CodecModel
Named parameter tensors plus metadata, saved with torch.save
"""

import hashlib
import logging
import os
from typing import Any, Dict, Optional, Tuple

import torch

from . import __version__
from .codec_core import CodecModel
from .errors import ArchitectureMismatchError, CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nicguard-checkpoint"
_ARCHITECTURE_KEYS = ("mode", "channels", "latent_channels", "num_stages", "hyper_channels", "image_channels")


def checkpoint_name(model: CodecModel, step: int) -> str:
    return f"{model.mode}_lmbda{model.lmbda:g}_{model.distortion}_step{step:06d}.pt"


def save_checkpoint(model: CodecModel, directory: str, step: int = 0, name: Optional[str] = None) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name or checkpoint_name(model, step))
    metadata = model.metadata()
    metadata["step"] = int(step)
    container = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "metadata": metadata,
        "tensors": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    torch.save(container, path)
    logger.info(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path: str, device: str = "cpu", dtype: torch.dtype = torch.float32) -> Tuple[CodecModel, Dict[str, Any]]:
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: {path}", path=path)
    try:
        container = torch.load(path, map_location="cpu")
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}", path=path)
    if not isinstance(container, dict) or container.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} container", path=path)

    metadata = dict(container["metadata"])
    model = CodecModel(
        channels=metadata["channels"],
        latent_channels=metadata["latent_channels"],
        mode=metadata["mode"],
        lmbda=metadata["lmbda"],
        distortion=metadata["distortion"],
        num_stages=metadata["num_stages"],
        hyper_channels=metadata["hyper_channels"],
        image_channels=metadata.get("image_channels", 3),
    ).to(dtype=dtype)
    try:
        model.load_state_dict(container["tensors"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint tensors do not match its metadata: {e}", path=path)
    model.to(device=device)
    model.eval()
    return model, metadata


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parameters_hash(model: CodecModel) -> str:
    """Hash of the raw parameter bytes, independent of file layout"""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def check_same_architecture(first: CodecModel, second: CodecModel) -> None:
    a, b = first.architecture(), second.architecture()
    mismatched = {k: (a[k], b[k]) for k in _ARCHITECTURE_KEYS if a[k] != b[k]}
    if mismatched:
        raise ArchitectureMismatchError(
            "Models do not share an architecture",
            mismatched={k: list(v) for k, v in mismatched.items()},
        )
