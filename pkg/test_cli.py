import json
import os

import pytest
import torch

from backend import cli
from backend.checkpoints import load_checkpoint, parameters_hash, save_checkpoint
from backend.config import AttackConfig, TrainConfig, resolve_config
from backend.datasets import center_mask, save_image
from backend.errors import ConfigError
from backend.trainer import build_model
from conftest import make_image, make_model


@pytest.fixture
def inputs(tmp_path, monkeypatch):
    for var in ("NICGUARD_OUTPUT_ROOT", "NICGUARD_DEVICE", "NICGUARD_PRECISION"):
        monkeypatch.delenv(var, raising=False)
    checkpoint = save_checkpoint(make_model(dtype=torch.float32), str(tmp_path / "models"), name="tiny.pt")
    image = tmp_path / "images" / "source.png"
    save_image(make_image(size=16, dtype=torch.float32), image)
    target = tmp_path / "images" / "target.png"
    save_image(make_image(size=16, seed=1, dtype=torch.float32), target)
    return {"checkpoint": checkpoint, "image": str(image), "target": str(target), "root": tmp_path}


def test_attack_flags_reach_the_spec(inputs, monkeypatch):
    captured = {}
    real = cli.generate_adversarial

    def recording(x, model, spec, progress=False):
        captured["spec"] = spec
        return real(x, model, spec.model_copy(update={"steps": 1}))

    monkeypatch.setattr(cli, "generate_adversarial", recording)
    out = inputs["root"] / "run"
    code = cli.main([
        "attack", "--checkpoint", inputs["checkpoint"], "--image", inputs["image"],
        "--output-dir", str(out), "--epsilon", "0.002", "--steps", "7",
        "--learning-rate", "0.01", "--distance", "l1", "--seed", "3",
    ])
    assert code == 0
    spec = captured["spec"]
    assert (spec.epsilon, spec.steps, spec.learning_rate, spec.distance_kind, spec.seed) == (0.002, 7, 0.01, "l1", 3)


def test_attack_end_to_end(inputs):
    out = inputs["root"] / "run"
    code = cli.main([
        "attack", "--checkpoint", inputs["checkpoint"], "--image", inputs["image"],
        "--output-dir", str(out), "--steps", "2",
    ])
    assert code == 0
    for name in ("run_config.json", "attack.json", "attack.csv", "source_adversarial.png",
                 "source_adv_reconstruction.png", "source_adversarial.npy"):
        assert (out / name).exists(), name
    report = json.loads((out / "attack.json").read_text())
    assert [r["condition"] for r in report["rows"]] == ["clean", "attacked", "attacked_8bit"]
    assert list(report["provenance"]["checkpoint_hashes"]) == [inputs["checkpoint"]]
    run_config = json.loads((out / "run_config.json").read_text())
    assert run_config["command"] == "attack" and run_config["steps"] == 2


def test_missing_checkpoint_is_a_usage_error(inputs, capsys):
    out = inputs["root"] / "never"
    code = cli.main([
        "attack", "--checkpoint", str(inputs["root"] / "absent.pt"),
        "--image", inputs["image"], "--output-dir", str(out),
    ])
    assert code == 2
    assert not out.exists()
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigError"


def test_bad_flag_exits_nonzero(inputs):
    assert cli.main(["attack", "--epsilon", "lots"]) != 0
    assert cli.main(["no-such-command"]) != 0


def test_unknown_config_key(inputs, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"checkpoint": inputs["checkpoint"], "image": inputs["image"], "colour": "red"}))
    assert cli.main(["attack", "--config", str(config), "--output-dir", str(tmp_path / "run")]) == 2


def test_config_precedence(inputs, tmp_path, monkeypatch):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "checkpoint": inputs["checkpoint"], "image": inputs["image"],
        "output_dir": "from_file", "epsilon": 0.5,
    }))
    resolved = resolve_config(AttackConfig, str(config), {})
    assert resolved.output_dir == "from_file" and resolved.epsilon == 0.5

    monkeypatch.setenv("NICGUARD_OUTPUT_ROOT", "from_env")
    assert resolve_config(AttackConfig, str(config), {}).output_dir == "from_env"
    resolved = resolve_config(AttackConfig, str(config), {"output_dir": "from_flag", "epsilon": None})
    assert resolved.output_dir == "from_flag" and resolved.epsilon == 0.5


def test_invalid_values_raise_config_error(inputs):
    with pytest.raises(ConfigError) as info:
        resolve_config(AttackConfig, None, {"checkpoint": inputs["checkpoint"], "image": inputs["image"], "epsilon": -1.0})
    assert info.value.details["errors"][0]["field"] == "epsilon"


def _train_args(out, steps):
    return [
        "train", "--output-dir", str(out), "--steps", str(steps), "--seed", "1",
        "--channels", "4", "--latent-channels", "4", "--num-stages", "1",
        "--synthetic-count", "2", "--synthetic-size", "16", "--patch-size", "8", "--batch-size", "2",
    ]


def test_train_zero_steps_saves_initialization(inputs):
    out = inputs["root"] / "train0"
    assert cli.main(_train_args(out, 0)) == 0
    checkpoints = list(out.glob("*.pt"))
    assert len(checkpoints) == 1
    loaded, metadata = load_checkpoint(str(checkpoints[0]))
    assert metadata["step"] == 0
    config = TrainConfig(seed=1, channels=4, latent_channels=4, num_stages=1)
    assert parameters_hash(loaded) == parameters_hash(build_model(config))


def test_train_is_deterministic(inputs):
    first, second = inputs["root"] / "a", inputs["root"] / "b"
    assert cli.main(_train_args(first, 2)) == 0
    assert cli.main(_train_args(second, 2)) == 0
    a, _ = load_checkpoint(str(next(first.glob("*.pt"))))
    b, _ = load_checkpoint(str(next(second.glob("*.pt"))))
    assert parameters_hash(a) == parameters_hash(b)
    assert os.path.exists(first / "train_log.jsonl")


def test_recompress_without_jpeg(inputs):
    out = inputs["root"] / "recompress"
    code = cli.main([
        "recompress", "--checkpoint", inputs["checkpoint"], "--image", inputs["image"],
        "--rounds", "2", "--no-jpeg", "--output-dir", str(out),
    ])
    assert code == 0
    report = json.loads((out / "recompression.json").read_text())
    assert {r["model_id"] for r in report["rows"]} == {"tiny"}
    assert len(report["rows"]) == 2


def test_targeted_with_mask(inputs):
    mask_path = inputs["root"] / "mask.png"
    save_image(center_mask(16, 16).expand(1, 16, 16), mask_path)
    out = inputs["root"] / "targeted"
    code = cli.main([
        "targeted", "--checkpoint", inputs["checkpoint"], "--image", inputs["image"],
        "--target", inputs["target"], "--mask", str(mask_path), "--steps", "2",
        "--compare-weights", "--output-dir", str(out),
    ])
    assert code == 0
    assert (out / "targeted_demo.json").exists()
    assert (out / "mask_weight_comparison.json").exists()
    assert (out / "targeted_grid.png").exists()


def test_compare_weights_needs_mask(inputs):
    code = cli.main([
        "targeted", "--checkpoint", inputs["checkpoint"], "--image", inputs["image"],
        "--target", inputs["target"], "--compare-weights", "--steps", "1",
        "--output-dir", str(inputs["root"] / "t"),
    ])
    assert code == 2


def test_train_with_empty_dataset_leaves_nothing_behind(inputs):
    empty = inputs["root"] / "empty"
    empty.mkdir()
    out = inputs["root"] / "train_empty"
    args = _train_args(out, 1) + ["--dataset", str(empty)]
    assert cli.main(args) == 1
    assert not out.exists()


def test_train_patch_larger_than_images_leaves_nothing_behind(inputs):
    out = inputs["root"] / "train_big_patch"
    args = _train_args(out, 1) + ["--patch-size", "32"]
    assert cli.main(args) == 1
    assert not out.exists()


def test_finetune_patch_larger_than_images_leaves_nothing_behind(inputs):
    out = inputs["root"] / "finetune_big_patch"
    code = cli.main([
        "finetune", "--checkpoint", inputs["checkpoint"], "--output-dir", str(out),
        "--synthetic-count", "2", "--synthetic-size", "16", "--patch-size", "32", "--iterations", "1",
    ])
    assert code == 1
    assert not out.exists()


def test_inspect_noise_inversion(inputs):
    out = inputs["root"] / "inversion"
    code = cli.main([
        "inspect", "--kind", "noise-inversion", "--checkpoint", inputs["checkpoint"],
        "--image", inputs["image"], "--steps", "2", "--output-dir", str(out),
    ])
    assert code == 0
    for name in ("run_config.json", "noise_inversion.json", "noise_inversion.csv",
                 "source_noise.png", "source_noise_reconstruction.png"):
        assert (out / name).exists(), name
    report = json.loads((out / "noise_inversion.json").read_text())
    assert [r["condition"] for r in report["rows"]] == ["noise_inversion"]
    assert "input_psnr_db" in report["rows"][0]["extra"]


def test_inspect_latent_histograms(inputs):
    out = inputs["root"] / "histograms"
    code = cli.main([
        "inspect", "--kind", "latent-histograms", "--checkpoint", inputs["checkpoint"],
        "--image", inputs["image"], "--steps", "1", "--channels", "0", "2", "--bins", "8",
        "--output-dir", str(out),
    ])
    assert code == 0
    histograms = json.loads((out / "latent_histograms.json").read_text())
    assert sorted(histograms["channels"]) == ["0", "2"]
    assert len(histograms["bin_edges"]) == 9
    assert len(histograms["channels"]["0"]["clean"]) == 8


def test_inspect_rejects_unknown_channel(inputs):
    out = inputs["root"] / "bad_channel"
    code = cli.main([
        "inspect", "--kind", "latent-histograms", "--checkpoint", inputs["checkpoint"],
        "--image", inputs["image"], "--channels", "99", "--output-dir", str(out),
    ])
    assert code == 2
    assert not out.exists()
