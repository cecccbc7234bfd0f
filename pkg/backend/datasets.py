"""
Image ingestion, export and training data for the codec
PNG in/out, lossless float sidecars, seeded patch sampling and the
deterministic synthetic corpora used when no dataset is downloaded
"""

import logging
import os
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .errors import DatasetError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")
SIDECAR_EXTENSION = ".npy"
_EIGHT_BIT_MODES = {"L", "RGB", "RGBA", "P", "LA"}


def to_three_channels(x: torch.Tensor) -> torch.Tensor:
    """Replicate single-channel images to 3 identical channels"""
    if x.shape[-3] == 1:
        repeats = [1] * x.dim()
        repeats[-3] = 3
        return x.repeat(*repeats)
    return x


def quantize_8bit(x: torch.Tensor) -> torch.Tensor:
    return torch.round(x.clamp(0.0, 1.0) * 255.0) / 255.0


def _has_sixteen_bit_samples(img: Image.Image) -> bool:
    """48-bit RGB PNGs open as mode RGB; only the raw decoder mode shows the depth"""
    for tile in img.tile:
        args = tile[3] if len(tile) > 3 else None
        raw_mode = args[0] if isinstance(args, tuple) and args else args
        if isinstance(raw_mode, str) and ";16" in raw_mode:
            return True
    return False


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """
    Load an 8-bit image (or a float sidecar) as a (1, 3, H, W) float32 tensor
    with values in [0, 1]
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Image not found: {path}", path=str(path))

    if path.suffix.lower() == SIDECAR_EXTENSION:
        return load_float_sidecar(path)

    try:
        with Image.open(path) as img:
            deep = _has_sixteen_bit_samples(img)
            img.load()
            if deep or img.mode not in _EIGHT_BIT_MODES:
                raise DatasetError(
                    f"Unsupported bit depth / mode {img.mode} in {path}", path=str(path), mode=img.mode
                )
            if img.mode in ("L", "LA"):
                array = np.asarray(img.convert("L"), dtype=np.float32)[None, :, :]
            else:
                array = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
    except DatasetError:
        raise
    except Exception as e:
        raise DatasetError(f"Unreadable image {path}: {e}", path=str(path))

    tensor = torch.from_numpy(np.ascontiguousarray(array / 255.0)).unsqueeze(0)
    return to_three_channels(tensor)


def save_image(x: torch.Tensor, path: Union[str, Path]) -> None:
    """Write a (C, H, W) or (1, C, H, W) tensor as an 8-bit PNG"""
    if x.dim() == 4:
        x = x[0]
    array = (quantize_8bit(x.detach().cpu().float()) * 255.0).round().to(torch.uint8).numpy()
    array = array.transpose(1, 2, 0)
    if array.shape[2] == 1:
        array = array[:, :, 0]
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(array).save(str(path))


def save_float_sidecar(x: torch.Tensor, path: Union[str, Path]) -> None:
    """Lossless float32 (C, H, W) copy, keeps sub-1/255 perturbations"""
    if x.dim() == 4:
        x = x[0]
    np.save(str(path), x.detach().cpu().to(torch.float32).numpy())


def load_float_sidecar(path: Union[str, Path]) -> torch.Tensor:
    try:
        array = np.load(str(path))
    except Exception as e:
        raise DatasetError(f"Unreadable float sidecar {path}: {e}", path=str(path))
    if array.ndim == 2:
        array = array[None, :, :]
    if array.ndim != 3:
        raise DatasetError(f"Float sidecar {path} must be (C, H, W), got {array.shape}", path=str(path))
    if array.min() < 0.0 or array.max() > 1.0:
        raise DatasetError(f"Float sidecar {path} has values outside [0, 1]", path=str(path))
    tensor = torch.from_numpy(np.ascontiguousarray(array.astype(np.float32))).unsqueeze(0)
    return to_three_channels(tensor)


def list_images(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"Dataset directory not found: {directory}", path=str(directory))
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def load_image_directory(directory: Union[str, Path], limit: Optional[int] = None) -> List[torch.Tensor]:
    paths = list_images(directory)
    if not paths:
        raise DatasetError(f"No images found in {directory}", path=str(directory))
    if limit is not None:
        paths = paths[:limit]
    logger.info(f"Loading {len(paths)} images from {directory}")
    return [load_image(p) for p in paths]


class PatchSampler:
    """Random crops of a fixed size from a list of (1, C, H, W) images, seeded"""

    def __init__(self, images: Sequence[torch.Tensor], patch_size: int, seed: int = 0):
        if not images:
            raise DatasetError("Patch sampler needs at least one image")
        for index, img in enumerate(images):
            if img.shape[-2] < patch_size or img.shape[-1] < patch_size:
                raise DatasetError(
                    f"Image {index} of size {tuple(img.shape[-2:])} is smaller than the {patch_size}px patch",
                    index=index,
                )
        self.images = list(images)
        self.patch_size = int(patch_size)
        self.generator = torch.Generator()
        self.generator.manual_seed(int(seed))

    def __len__(self) -> int:
        return len(self.images)

    def _randint(self, high: int) -> int:
        return int(torch.randint(high, (1,), generator=self.generator))

    def sample(self, batch_size: int) -> torch.Tensor:
        patches = []
        for _ in range(batch_size):
            img = self.images[self._randint(len(self.images))]
            top = self._randint(img.shape[-2] - self.patch_size + 1)
            left = self._randint(img.shape[-1] - self.patch_size + 1)
            patches.append(img[0, :, top: top + self.patch_size, left: left + self.patch_size])
        return torch.stack(patches)


def _to_tensor(array: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> (1, 3, H, W) float32"""
    return torch.from_numpy(array.astype(np.float32).transpose(2, 0, 1) / 255.0).unsqueeze(0)


def gradient_image(size: int = 64, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    start, stop = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    angle = rng.uniform(0, np.pi / 2)
    ramp = np.cos(angle) * xs + np.sin(angle) * ys
    ramp = ramp / ramp.max()
    array = start[None, None, :] + (stop - start)[None, None, :] * ramp[:, :, None]
    return _to_tensor(np.round(array * 255).astype(np.uint8))


def checkerboard_image(size: int = 64, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    period = int(rng.integers(4, 17))
    ys, xs = np.mgrid[0:size, 0:size]
    board = ((ys // period + xs // period) % 2).astype(np.float64)
    low, high = rng.uniform(0, 0.4, 3), rng.uniform(0.6, 1.0, 3)
    array = low[None, None, :] + (high - low)[None, None, :] * board[:, :, None]
    return _to_tensor(np.round(array * 255).astype(np.uint8))


def filtered_noise_image(size: int = 64, seed: int = 0, radius: float = 2.0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    blurred = Image.fromarray(raw).filter(ImageFilter.GaussianBlur(radius))
    return _to_tensor(np.asarray(blurred))


def noise_image(size: int = 64, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return _to_tensor(rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


def shapes_image(size: int = 64, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    background = tuple(int(v) for v in rng.integers(0, 256, 3))
    img = Image.new("RGB", (size, size), background)
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(3, 8))):
        x0, y0 = (int(v) for v in rng.integers(0, size, 2))
        x1, y1 = x0 + int(rng.integers(4, size // 2)), y0 + int(rng.integers(4, size // 2))
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        if rng.uniform() < 0.5:
            draw.ellipse([x0, y0, x1, y1], fill=color)
        else:
            draw.rectangle([x0, y0, x1, y1], fill=color)
    img = img.filter(ImageFilter.GaussianBlur(0.8))
    return _to_tensor(np.asarray(img))


SYNTHETIC_KINDS = (gradient_image, checkerboard_image, filtered_noise_image, shapes_image)


def synthetic_images(count: int = 16, size: int = 64, seed: int = 0) -> List[torch.Tensor]:
    """Deterministic mix of gradients, checkerboards, filtered noise and shapes"""
    images = []
    for index in range(count):
        kind = SYNTHETIC_KINDS[index % len(SYNTHETIC_KINDS)]
        images.append(kind(size=size, seed=seed * 100003 + index))
    return images


def digit_image(digit: int, size: int = 32, seed: int = 0) -> torch.Tensor:
    """A white-on-black handwritten-style digit, replicated to 3 channels"""
    rng = np.random.default_rng(seed * 10 + digit)
    canvas = Image.new("L", (16, 16), 0)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
    offset_x = (16 - (right - left)) // 2 - left + int(rng.integers(-1, 2))
    offset_y = (16 - (bottom - top)) // 2 - top + int(rng.integers(-1, 2))
    draw.text((offset_x, offset_y), str(digit), fill=255, font=font)
    canvas = canvas.resize((size, size), Image.BILINEAR).filter(ImageFilter.GaussianBlur(0.6))
    array = np.asarray(canvas, dtype=np.float32)[None, :, :] / 255.0
    return to_three_channels(torch.from_numpy(array).unsqueeze(0))


def synthetic_digits(size: int = 32, seed: int = 0) -> List[torch.Tensor]:
    return [digit_image(d, size=size, seed=seed) for d in range(10)]


def center_mask(height: int, width: int, fraction: float = 0.5) -> torch.Tensor:
    """Binary (H, W) ROI covering a centered box of the given side fraction"""
    mask = torch.zeros(height, width)
    box_h, box_w = max(1, int(round(height * fraction))), max(1, int(round(width * fraction)))
    top, left = (height - box_h) // 2, (width - box_w) // 2
    mask[top: top + box_h, left: left + box_w] = 1.0
    return mask


def load_mask(path: Union[str, Path]) -> torch.Tensor:
    """ROI mask from a grayscale PNG, pixels above 127 are ROI"""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("L"), dtype=np.float32)
    except Exception as e:
        raise DatasetError(f"Unreadable mask {path}: {e}", path=str(path))
    return torch.from_numpy((array > 127).astype(np.float32))


def load_dataset(source: str, synthetic_count: int = 32, synthetic_size: int = 128, seed: int = 0) -> List[torch.Tensor]:
    """`synthetic` builds the in-memory corpus, anything else is an image directory"""
    if source == "synthetic":
        logger.info(f"Using {synthetic_count} synthetic {synthetic_size}px images (seed {seed})")
        return synthetic_images(synthetic_count, synthetic_size, seed=seed)
    return load_image_directory(source)
