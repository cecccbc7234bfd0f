"""
Figures from reports and results. Optional; nothing else reads these files.
"""

import logging
import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from .reports import ExperimentReport  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Saved figure {path}")
    return path


def plot_rd_curve(report: ExperimentReport, path: str, quality: str = "psnr_db") -> str:
    """One line per model family, bpp on x"""
    frame = report.to_frame()
    fig, ax = plt.subplots(figsize=(5, 4))
    for family, group in frame.groupby("tag_family", sort=True):
        group = group.sort_values("bpp")
        ax.plot(group["bpp"], group[quality], marker="o", label=str(family))
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)" if quality == "psnr_db" else quality)
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_recompression(report: ExperimentReport, path: str) -> str:
    """PSNR against the original versus recompression round"""
    frame = report.to_frame()
    fig, ax = plt.subplots(figsize=(5, 4))
    for model_id, group in frame.groupby("model_id", sort=True):
        group = group.sort_values("tag_round")
        ax.plot(group["tag_round"], group["psnr_db"], label=str(model_id))
    ax.set_xlabel("round")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def save_image_grid(
    images: Sequence[torch.Tensor],
    path: str,
    titles: Optional[Sequence[str]] = None,
    columns: Optional[int] = None,
) -> str:
    columns = columns or len(images)
    rows = (len(images) + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns, figsize=(2.5 * columns, 2.5 * rows), squeeze=False)
    for index, ax in enumerate(axes.flat):
        ax.axis("off")
        if index >= len(images):
            continue
        image = images[index]
        if image.dim() == 4:
            image = image[0]
        ax.imshow(image.detach().cpu().float().clamp(0, 1).permute(1, 2, 0).numpy())
        if titles is not None:
            ax.set_title(titles[index], fontsize=8)
    return _save(fig, path)
