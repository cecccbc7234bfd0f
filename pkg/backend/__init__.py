"""
nicguard - learned image codec robustness toolkit
Trains a compact VAE image codec, attacks it with bounded input noise and
hardens it with iterative adversarial finetuning.
"""

__version__ = "1.0.0"
