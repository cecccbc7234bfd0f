import math

import pytest
import torch

from backend.entropy_models import (
    LIKELIHOOD_FLOOR,
    FactorizedPrior,
    GaussianConditional,
    QuantizationNoise,
    quantize,
    rate_bits,
    round_half_away,
    uniform_noise,
)
from backend.errors import ParameterError


def test_uniform_noise_open_interval():
    generator = torch.Generator().manual_seed(0)
    noise = uniform_noise(torch.zeros(100000, dtype=torch.float64), generator=generator)
    assert noise.min() > -0.5
    assert noise.max() < 0.5
    assert abs(float(noise.mean())) < 0.01


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_uniform_noise_never_reaches_minus_half(monkeypatch, dtype):
    # the smallest possible draw of torch.rand is exactly 0
    monkeypatch.setattr(torch, "rand", lambda shape, **kwargs: torch.zeros(shape, dtype=kwargs["dtype"]))
    noise = uniform_noise(torch.empty(8, dtype=dtype))
    assert noise.dtype == dtype
    assert torch.all(noise > -0.5)
    assert torch.all(noise - (-0.5) < 1e-6)


def test_round_half_away_from_zero():
    z = torch.tensor([0.5, -0.5, 1.5, -1.5, 0.49, -2.51, 0.0])
    assert torch.equal(round_half_away(z), torch.tensor([1.0, -1.0, 2.0, -2.0, 0.0, -3.0, 0.0]))
    assert torch.equal(quantize(z, "eval"), round_half_away(z))


def test_quantize_modes():
    z = torch.zeros(4)
    fixed = torch.full((4,), 0.25)
    assert torch.equal(quantize(z, "noise", noise=fixed), fixed)
    assert torch.equal(quantize(z, "train", noise=fixed), fixed)
    with pytest.raises(ParameterError):
        quantize(z, "noise")
    with pytest.raises(ParameterError):
        quantize(z, "stochastic")


def test_quantization_noise_is_fixed_per_key():
    like = torch.zeros(2, 3)
    noise = QuantizationNoise(seed=7)
    first = noise.draw("latent", like)
    assert torch.equal(noise.draw("latent", like), first)
    assert not torch.equal(noise.draw("hyper_latent", like), first)
    assert torch.equal(QuantizationNoise(seed=7).draw("latent", like), first)
    assert not torch.equal(QuantizationNoise(seed=8).draw("latent", like), first)


def test_rate_bits():
    lik = torch.full((2, 4), 0.5)
    assert float(rate_bits(lik)) == pytest.approx(8.0)
    assert float(rate_bits([lik, torch.full((3,), 0.25)])) == pytest.approx(14.0)
    with pytest.raises(ParameterError):
        rate_bits(torch.tensor([0.5, 0.0]))
    with pytest.raises(ParameterError):
        rate_bits([])


class UniformCdfPrior(FactorizedPrior):
    """Cumulative of the uniform distribution on [-128, 128]"""

    def _logits_cumulative(self, inputs, stop_gradient=False):
        c = ((inputs + 128.0) / 256.0).clamp(1e-12, 1 - 1e-12)
        return torch.log(c) - torch.log1p(-c)


def test_factorized_likelihood_of_uniform_cumulative():
    prior = UniformCdfPrior(2).double()
    z_hat = torch.tensor([3.0, 5.0, -7.0, 100.0], dtype=torch.float64).reshape(1, 2, 1, 2)
    lik = prior.likelihood(z_hat)
    assert torch.allclose(lik, torch.full_like(lik, 1 / 256), atol=1e-9)


def test_factorized_likelihoods_sum_to_one():
    torch.manual_seed(0)
    prior = FactorizedPrior(3).double()
    grid = torch.arange(-200, 201, dtype=torch.float64)
    z_hat = grid.reshape(1, 1, 1, -1).repeat(1, 3, 1, 1)
    lik = prior.likelihood(z_hat)
    assert torch.all(lik >= LIKELIHOOD_FLOOR * (1 - 1e-6))
    totals = lik.sum(dim=-1).flatten()
    assert torch.allclose(totals, torch.ones(3, dtype=torch.float64), atol=1e-3)


def test_factorized_prior_channel_mismatch():
    with pytest.raises(ParameterError):
        FactorizedPrior(3).likelihood(torch.zeros(1, 2, 2, 2))


def _phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


@pytest.mark.parametrize("value, scale", [(0.0, 1.0), (1.0, 2.0), (-3.0, 0.5), (2.0, 10.0)])
def test_gaussian_conditional_closed_form(value, scale):
    z_hat = torch.tensor([[[[value]]]], dtype=torch.float64)
    scales = torch.tensor([[[[scale]]]], dtype=torch.float64)
    lik = GaussianConditional().likelihood(z_hat, scales)
    v = abs(value)
    expected = _phi((0.5 - v) / scale) - _phi((-0.5 - v) / scale)
    assert float(lik) == pytest.approx(max(expected, LIKELIHOOD_FLOOR), abs=1e-12)


def test_gaussian_conditional_floors():
    model = GaussianConditional()
    z_hat = torch.tensor([[[[0.0, 40.0]]]], dtype=torch.float64)
    scales = torch.zeros_like(z_hat)
    lik = model.likelihood(z_hat, scales)
    # zero scale is floored: all mass at 0, nothing elsewhere but the likelihood floor
    assert float(lik[..., 0]) == pytest.approx(1.0)
    assert float(lik[..., 1]) == pytest.approx(LIKELIHOOD_FLOOR)
    with pytest.raises(ParameterError):
        model.likelihood(z_hat, torch.ones(1, 1, 1, 3))
