import math

import pytest
import torch

from backend import experiments
from backend.attack import AttackSpec
from backend.codec_core import codec_roundtrip
from backend.datasets import center_mask
from backend.errors import ParameterError
from conftest import make_image, make_model

FAST = AttackSpec(steps=2, epsilon=1.0)


def test_recompress_rounds(tiny_model, image):
    steps = experiments.recompress(image, tiny_model, rounds=3)
    assert [s.round for s in steps] == [1, 2, 3]
    first, _ = codec_roundtrip(image, tiny_model)
    assert torch.equal(steps[0].reconstruction, first)
    assert all(s.bpp >= 0 for s in steps)


def test_recompress_is_deterministic(tiny_model, image):
    a = experiments.recompress(image, tiny_model, rounds=2)
    b = experiments.recompress(image, tiny_model, rounds=2)
    assert all(torch.equal(x.reconstruction, y.reconstruction) for x, y in zip(a, b))


def test_recompress_rejects_zero_rounds(tiny_model, image):
    with pytest.raises(ParameterError):
        experiments.recompress(image, tiny_model, rounds=0)
    with pytest.raises(ParameterError):
        experiments.jpeg_recompress(image, rounds=0)


def test_jpeg_recompress(image):
    steps = experiments.jpeg_recompress(image, rounds=2, quality=75)
    assert len(steps) == 2
    assert steps[0].reconstruction.shape == image.shape
    assert steps[0].bpp > 0


def test_recompression_study_rows(tiny_model, image):
    models = {"a": tiny_model, "b": make_model(seed=1, lmbda=64)}
    report = experiments.recompression_study(image, models, rounds=3)
    assert len(report.rows) == 3 * 3
    assert {r.model_id for r in report.rows} == {"a", "b", "jpeg"}
    assert sorted(r.tags["round"] for r in report.select(model_id="b")) == [1, 2, 3]
    assert all(r.condition == "recompressed" for r in report.rows)

    without_jpeg = experiments.recompression_study(image, models, rounds=2, include_jpeg=False)
    assert len(without_jpeg.rows) == 4


def test_epsilon_sweep(tiny_model, image):
    report = experiments.epsilon_sweep(image, tiny_model, epsilons=(1e-4, 1e-2), spec=FAST)
    assert [r.condition for r in report.rows] == ["clean", "attacked", "attacked"]
    assert [r.tags.get("epsilon") for r in report.rows[1:]] == [1e-4, 1e-2]
    assert report.provenance.seeds == {"attack": 0}
    with pytest.raises(ParameterError):
        experiments.epsilon_sweep(image, tiny_model, epsilons=(1e-3, 0.0))


def test_quality_sweep(image):
    models = [make_model(lmbda=64), make_model(lmbda=1024)]
    report = experiments.quality_sweep(image, models, spec=FAST)
    assert len(report.rows) == 4
    assert {r.model_id for r in report.rows} == {"lmbda64", "lmbda1024"}
    with pytest.raises(ParameterError):
        experiments.quality_sweep(image, models[:1], spec=FAST)


def test_distance_ablation(tiny_model, image):
    report = experiments.distance_ablation(image, tiny_model, spec=FAST)
    assert [r.tags["distance"] for r in report.rows] == ["l2", "l1", "ms_ssim"]
    assert all("quantized_psnr_db" in r.extra for r in report.rows)


def test_rd_curve(image):
    families = {
        "baseline": [make_model(lmbda=64), make_model(lmbda=1024)],
        "finetuned": [make_model(seed=2, lmbda=256)],
    }
    eval_set = [image, make_image(seed=4)]
    report = experiments.rd_curve(families, eval_set)
    assert len(report.rows) == 3
    row = report.select(model_id="baseline_lmbda64")[0]
    assert row.image_id == "mean" and row.tags["images"] == 2
    assert row.extra["rd_loss"] > 0
    points = experiments.rd_points(report, "baseline")
    assert len(points) == 2 and points[0][0] <= points[1][0]
    with pytest.raises(ParameterError):
        experiments.rd_curve(families, [])


def test_targeted_demo(tiny_model, image, target_image):
    spec = AttackSpec(mode="targeted", target=target_image, steps=3, epsilon=1.0)
    result, report = experiments.targeted_demo(image, target_image, tiny_model, spec)
    assert [r.condition for r in report.rows] == ["clean", "attacked"]
    extra = report.rows[1].extra
    for key in ("distance_to_target", "distance_to_source", "clean_distance_to_target"):
        assert extra[key] >= 0
    assert result.adversarial_example.shape == image.shape
    with pytest.raises(ParameterError):
        experiments.targeted_demo(image, target_image, tiny_model, FAST)


def test_mask_weight_comparison(tiny_model, image, target_image):
    report = experiments.mask_weight_comparison(
        image, target_image, center_mask(8, 8), tiny_model, spec=AttackSpec(steps=2, epsilon=1.0)
    )
    attacked = report.select(condition="attacked")
    assert len(attacked) == 2
    assert {r.tags["lambda_bkg"] for r in attacked} == {0.1, "inf"}
    for row in attacked:
        assert "roi_distance_to_target" in row.extra
        assert "background_distance_to_source" in row.extra


def test_noise_inversion_probe(tiny_model, image):
    result = experiments.noise_inversion_probe(image, tiny_model, steps=3, learning_rate=1e-2)
    assert len(result.loss_trace) == 3
    assert result.noise.shape == image.shape
    assert 0 <= float(result.noise.min()) and float(result.noise.max()) <= 1
    assert not math.isnan(result.reconstruction_psnr)
    assert result.noise_bpp > 0


def test_latent_histograms(tiny_model, image):
    x_adv = (image + 0.01).clamp(0, 1)
    histograms = experiments.latent_histograms(image, x_adv, tiny_model, channels=[0, 3], bins=16)
    assert len(histograms["bin_edges"]) == 17
    assert set(histograms["channels"]) == {"0", "3"}
    # 8x8 input, two stride-2 stages -> 2x2 latents per channel
    assert sum(histograms["channels"]["0"]["clean"]) == 4
    assert sum(histograms["channels"]["3"]["adversarial"]) == 4
    with pytest.raises(ParameterError):
        experiments.latent_histograms(image, x_adv, tiny_model, channels=[99])


def test_mean_rd_loss(tiny_model, image):
    value = experiments.mean_rd_loss(tiny_model, [image, make_image(seed=3)])
    assert math.isfinite(value) and value > 0
