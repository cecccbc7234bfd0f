#!/usr/bin/env python3
"""
Data Preparation Script for nicguard
Writes the deterministic synthetic training, evaluation and digit sets as PNGs
"""

import argparse
import os
import sys
from typing import List

import torch

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from backend.config import EnvironmentConfig  # noqa: E402
from backend.datasets import center_mask, save_image, synthetic_digits, synthetic_images  # noqa: E402


def save_set(images: List[torch.Tensor], output_dir: str, prefix: str) -> List[str]:
    """
    Save a list of (1, 3, H, W) images as 8-bit PNGs

    Args:
        images: Images in [0, 1]
        output_dir: Target directory, created if missing
        prefix: File name prefix

    Returns:
        Written paths
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    for index, image in enumerate(images):
        path = os.path.join(output_dir, f"{prefix}_{index:03d}.png")
        save_image(image, path)
        paths.append(path)
    print(f"Saved {len(paths)} images to {output_dir}")
    return paths


def main(argv=None):
    """Main function to generate the synthetic sets"""
    parser = argparse.ArgumentParser(description="Generate synthetic image sets")
    parser.add_argument("--output-dir", default=EnvironmentConfig.DATA_DIR)
    parser.add_argument("--train-count", type=int, default=64)
    parser.add_argument("--eval-count", type=int, default=16)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    print("Creating synthetic training data...")
    save_set(synthetic_images(args.train_count, args.size, seed=args.seed), os.path.join(args.output_dir, "train"), "train")

    # evaluation images come from a disjoint seed
    print("Creating synthetic evaluation data...")
    save_set(synthetic_images(args.eval_count, args.size, seed=args.seed + 1), os.path.join(args.output_dir, "eval"), "eval")

    print("Creating digit images...")
    save_set(synthetic_digits(32, seed=args.seed), os.path.join(args.output_dir, "digits"), "digit")

    for size in sorted({args.size, 32}):
        mask_path = os.path.join(args.output_dir, "masks", f"center_{size}.png")
        save_image(center_mask(size, size).expand(1, -1, -1), mask_path)

    print("\nData preparation complete!")
    print("\nNext steps:")
    print(f"1. Train a baseline: python main.py train --dataset {os.path.join(args.output_dir, 'train')}")
    print(f"2. Attack it:        python main.py attack --checkpoint <ckpt> --image {os.path.join(args.output_dir, 'eval', 'eval_000.png')}")


if __name__ == "__main__":
    main()
