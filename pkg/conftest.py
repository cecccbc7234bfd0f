"""
Shared fixtures: tiny deterministic codecs and images
"""

import pytest
import torch

from backend.codec_core import CodecModel

collect_ignore = ["examples"]


def make_model(mode="factorized", dtype=torch.float64, seed=0, **kwargs):
    torch.manual_seed(seed)
    options = {"channels": 8, "latent_channels": 8, "num_stages": 2 if mode == "factorized" else 1}
    options.update(kwargs)
    model = CodecModel(mode=mode, **options)
    return model.to(dtype=dtype).eval()


def make_image(size=8, seed=0, dtype=torch.float64, batch=1):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=generator, dtype=dtype)


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture
def tiny_hyper_model():
    return make_model(mode="hyperprior")


@pytest.fixture
def image():
    return make_image()


@pytest.fixture
def target_image():
    return make_image(seed=1)
