import pytest
import torch

from backend.codec_core import (
    CodecModel,
    analysis_transform,
    codec_roundtrip,
    crop_to,
    encode_latents,
    likelihoods,
    pad_to_multiple,
    rd_loss,
    reconstruct,
    synthesis_transform,
)
from backend.entropy_models import QuantizationNoise, rate_bits
from backend.errors import EntropyModelModeError, GeometryError, ParameterError
from backend import metrics
from conftest import make_image, make_model


def test_default_architecture():
    model = CodecModel()
    assert model.transform_factor == 16
    assert model.downsampling_factor == 16
    assert CodecModel(mode="hyperprior").downsampling_factor == 64
    meta = model.metadata()
    assert meta["lmbda"] == 1024.0
    assert meta["distortion"] == "mse"
    assert meta["num_stages"] == 4


@pytest.mark.parametrize("kwargs", [
    {"mode": "autoregressive"},
    {"distortion": "lpips"},
    {"lmbda": -1.0},
    {"num_stages": 0},
])
def test_invalid_model_options(kwargs):
    with pytest.raises(ParameterError):
        CodecModel(**kwargs)


def test_transform_shapes(tiny_model, image):
    z = analysis_transform(image, tiny_model)
    assert z.shape == (1, 8, 2, 2)
    x_hat = synthesis_transform(torch.round(z), tiny_model)
    assert x_hat.shape == image.shape
    assert x_hat.min() >= 0 and x_hat.max() <= 1


def test_transform_geometry_errors(tiny_model):
    with pytest.raises(GeometryError):
        analysis_transform(torch.rand(1, 3, 10, 8, dtype=torch.float64), tiny_model)
    with pytest.raises(GeometryError):
        analysis_transform(torch.rand(3, 8, 8, dtype=torch.float64), tiny_model)
    with pytest.raises(GeometryError):
        analysis_transform(torch.rand(1, 1, 8, 8, dtype=torch.float64), tiny_model)
    with pytest.raises(GeometryError):
        synthesis_transform(torch.zeros(1, 5, 2, 2, dtype=torch.float64), tiny_model)


def test_pad_and_crop():
    x = torch.rand(1, 3, 10, 7)
    padded, size = pad_to_multiple(x, 4)
    assert padded.shape == (1, 3, 12, 8)
    assert size == (10, 7)
    assert torch.equal(crop_to(padded, size), x)
    # reflect padding mirrors the last rows
    assert torch.equal(padded[..., 10, :7], x[..., 8, :])

    tiny = torch.rand(1, 3, 2, 2)
    padded, _ = pad_to_multiple(tiny, 8)
    assert padded.shape == (1, 3, 8, 8)

    same, size = pad_to_multiple(torch.rand(1, 3, 8, 8), 4)
    assert same.shape == (1, 3, 8, 8) and size == (8, 8)


def test_roundtrip_is_deterministic_and_bounded(tiny_model):
    x = make_image(size=9, seed=3)
    x_hat, bpp = codec_roundtrip(x, tiny_model)
    assert x_hat.shape == x.shape
    assert x_hat.min() >= 0 and x_hat.max() <= 1
    assert bpp > 0
    again, bpp_again = codec_roundtrip(x, tiny_model)
    assert torch.equal(x_hat, again)
    assert bpp == bpp_again


def test_roundtrip_bpp_accounts_unpadded_pixels(tiny_model, image):
    _, code = reconstruct(image, tiny_model, quantization="eval")
    total_bits = float(rate_bits(code.all_likelihoods()))
    _, bpp = codec_roundtrip(image, tiny_model)
    assert bpp == pytest.approx(total_bits / 64)


def test_eval_latents_are_integers(tiny_model, tiny_hyper_model, image):
    code = encode_latents(image, tiny_model)
    assert torch.equal(code.z_hat, torch.round(code.z_hat))
    assert code.hyper is None

    hyper_code = encode_latents(image, tiny_hyper_model)
    assert hyper_code.hyper is not None
    assert torch.equal(hyper_code.hyper.z_hat, torch.round(hyper_code.hyper.z_hat))
    assert len(hyper_code.all_likelihoods()) == 2


def test_likelihood_mode_mismatch(tiny_model, tiny_hyper_model, image):
    z_hat = encode_latents(image, tiny_model).z_hat
    with pytest.raises(EntropyModelModeError):
        likelihoods(z_hat, tiny_model, mode="hyperprior")
    hyper_z = encode_latents(image, tiny_hyper_model).z_hat
    with pytest.raises(EntropyModelModeError):
        likelihoods(hyper_z, tiny_hyper_model)


def test_likelihoods_in_unit_interval(tiny_hyper_model, image):
    code = encode_latents(image, tiny_hyper_model)
    for lik in code.all_likelihoods():
        assert torch.all(lik >= 0.999e-9) and torch.all(lik <= 1)


def test_rd_loss_composition(tiny_model, image):
    noise = QuantizationNoise(seed=0)
    out = rd_loss(image, tiny_model, quantization="noise", noise=noise)
    assert torch.allclose(out.loss, out.rate + tiny_model.lmbda * out.distortion)
    again = rd_loss(image, tiny_model, quantization="noise", noise=noise)
    assert torch.equal(out.loss, again.loss)

    msssim = rd_loss(image, tiny_model, distortion_kind="ms_ssim", quantization="noise", noise=noise)
    assert 0 <= float(msssim.distortion) <= 1
    with pytest.raises(ParameterError):
        rd_loss(image, tiny_model, distortion_kind="psnr")


def test_train_quantization_is_seeded(tiny_model, image):
    first = rd_loss(image, tiny_model, generator=torch.Generator().manual_seed(3))
    second = rd_loss(image, tiny_model, generator=torch.Generator().manual_seed(3))
    assert torch.equal(first.loss, second.loss)


@pytest.mark.parametrize("seed", range(20))
def test_rd_loss_gradient_matches_finite_differences(seed):
    model = make_model(lmbda=0.5)
    noise = QuantizationNoise(seed=seed)
    x = make_image(seed=seed).requires_grad_(True)

    def loss(inp):
        return rd_loss(inp, model, quantization="noise", noise=noise).loss

    assert torch.autograd.gradcheck(loss, (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


@pytest.mark.parametrize("mode", ["factorized", "hyperprior"])
@pytest.mark.parametrize("seed", range(5))
def test_rd_loss_encoder_weight_gradient(mode, seed):
    model = make_model(mode=mode, lmbda=0.5)
    noise = QuantizationNoise(seed=seed)
    x = make_image(seed=seed)
    weight = model.g_a[0].weight
    index = (seed % weight.shape[0], seed % 3, 2, 2)

    def loss():
        return float(rd_loss(x, model, quantization="noise", noise=noise).loss)

    rd_loss(x, model, quantization="noise", noise=noise).loss.backward()
    analytic = float(weight.grad[index])

    h = 1e-6
    original = float(weight[index])
    with torch.no_grad():
        weight[index] = original + h
        upper = loss()
        weight[index] = original - h
        lower = loss()
        weight[index] = original
    assert analytic == pytest.approx((upper - lower) / (2 * h), rel=1e-3, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_synthesis_transform_gradient(tiny_model, seed):
    generator = torch.Generator().manual_seed(seed)
    z_hat = torch.randn(1, tiny_model.latent_channels, 2, 2, generator=generator, dtype=torch.float64)
    target = make_image(seed=seed)

    def loss(z):
        return metrics.mse(synthesis_transform(z, tiny_model, clamp=False), target)

    assert torch.autograd.gradcheck(loss, (z_hat.requires_grad_(True),), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_rd_loss_parameter_gradients_finite(tiny_hyper_model, image):
    out = rd_loss(image, tiny_hyper_model, generator=torch.Generator().manual_seed(0))
    out.loss.backward()
    grads = [p.grad for p in tiny_hyper_model.parameters() if p.grad is not None]
    assert grads
    assert all(torch.isfinite(g).all() for g in grads)


def test_roundtrip_reconstruction_quality_metric(tiny_model, image):
    x_hat, bpp = codec_roundtrip(image, tiny_model)
    report = metrics.metric_report(image, x_hat, bpp)
    assert report.bpp == bpp
    assert 0 <= report.ms_ssim <= 1
