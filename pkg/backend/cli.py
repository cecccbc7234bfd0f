"""
Command-line entry points
Every command resolves and validates its config, loads its inputs, writes
run_config.json and only then starts working.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Type

from pydantic import ValidationError

from . import plots
from .attack import QUANTIZATION_SURROGATE, AttackSpec, export_adversarial, generate_adversarial
from .checkpoints import file_hash, load_checkpoint, save_checkpoint
from .config import (
    AttackConfig,
    CommonConfig,
    EvalConfig,
    FinetuneConfig,
    InspectConfig,
    RDCurveConfig,
    RecompressConfig,
    SweepConfig,
    TargetedConfig,
    TrainConfig,
    configure_logging,
    resolve_config,
    write_run_config,
)
from .datasets import PatchSampler, list_images, load_dataset, load_image, load_mask, save_image
from .defense import FinetuneSpec, adversarial_finetune, evaluate_defense
from .errors import AttackSpecError, ConfigError, NICGuardError, ParameterError
from .experiments import (
    distance_ablation,
    epsilon_sweep,
    latent_histograms,
    mask_weight_comparison,
    noise_inversion_probe,
    quality_sweep,
    rd_curve,
    recompression_study,
    targeted_demo,
)
from .metrics import metric_report, report_psnr
from .reports import ExperimentReport, Provenance, ReportRow, ReportWriter
from .trainer import build_sampler, train_baseline

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, AttackSpecError, ParameterError)


def _cli_values(args: argparse.Namespace, config_cls: Type[CommonConfig]) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in config_cls.model_fields if hasattr(args, name)}


def _provenance(config: CommonConfig, checkpoints: List[str], **notes: str) -> Provenance:
    return Provenance(
        spec=config.model_dump(),
        seeds={"seed": config.seed},
        checkpoint_hashes={path: file_hash(path) for path in checkpoints},
        notes={"quantization_surrogate": QUANTIZATION_SURROGATE, **notes},
    )


def _attack_spec(config, **overrides) -> AttackSpec:
    values = {
        "epsilon": config.epsilon,
        "steps": config.steps,
        "learning_rate": config.learning_rate,
        "seed": config.seed,
    }
    values.update(overrides)
    try:
        return AttackSpec(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        raise AttackSpecError(f"Invalid attack configuration: {e.errors()[0]['msg']}")


def _load_models(paths: List[str], config: CommonConfig):
    return [load_checkpoint(path, device=config.device, dtype=config.dtype)[0] for path in paths]


def _load_input(path: str, config: CommonConfig):
    return load_image(path).to(device=config.device, dtype=config.dtype)


def _eval_images(directory: str, limit: Optional[int], config: CommonConfig):
    paths = list_images(directory)[:limit] if limit else list_images(directory)
    if not paths:
        raise ConfigError(f"No images found in {directory}", path=directory)
    return [p.stem for p in paths], [_load_input(str(p), config) for p in paths]


def run_train(args: argparse.Namespace) -> int:
    config = resolve_config(TrainConfig, args.config, _cli_values(args, TrainConfig))
    sampler = build_sampler(config)
    write_run_config(config, config.output_dir, "train")
    path = train_baseline(config, run_dir=config.output_dir, progress=True, sampler=sampler)
    logger.info(f"Baseline checkpoint written to {path}")
    return 0


def run_attack(args: argparse.Namespace) -> int:
    config = resolve_config(AttackConfig, args.config, _cli_values(args, AttackConfig))
    model = _load_models([config.checkpoint], config)[0]
    x = _load_input(config.image, config)
    spec = _attack_spec(config, distance_kind=config.distance, init_amplitude=config.init_amplitude)
    write_run_config(config, config.output_dir, "attack")

    result = generate_adversarial(x, model, spec, progress=True)
    stem = Path(config.image).stem
    export_adversarial(result, config.output_dir, stem)

    report = ExperimentReport(experiment_id="attack", provenance=_provenance(config, [config.checkpoint]))
    tags = {"lmbda": model.lmbda, "epsilon": spec.epsilon, "distance": spec.distance_kind}
    report.append_row(ReportRow.from_metrics(result.original_metrics, stem, "model", "clean", tags=tags))
    report.append_row(ReportRow.from_metrics(
        result.metrics, stem, "model", "attacked", tags=tags,
        budget_satisfied=result.budget_satisfied,
        extra={"input_psnr_db": report_psnr(result.input_psnr), "final_loss": result.loss_trace[-1] if result.loss_trace else 0.0},
    ))
    report.append_row(ReportRow.from_metrics(
        result.quantized_metrics, stem, "model", "attacked_8bit", tags=tags,
        budget_satisfied=result.budget_satisfied,
        extra={"input_psnr_db": report_psnr(result.quantized_input_psnr)},
    ))
    ReportWriter(config.output_dir).write(report)
    return 0


def run_finetune(args: argparse.Namespace) -> int:
    config = resolve_config(FinetuneConfig, args.config, _cli_values(args, FinetuneConfig))
    model = _load_models([config.checkpoint], config)[0]
    images = load_dataset(config.dataset, config.synthetic_count, config.synthetic_size, seed=config.seed)
    sampler = PatchSampler(images, config.patch_size, seed=config.seed)
    if config.lmbda is None:
        config = config.model_copy(update={"lmbda": model.lmbda})
    spec = FinetuneSpec(
        iterations=config.iterations,
        attack_steps=config.attack_steps,
        batch_size=config.batch_size,
        clean_fraction=config.clean_fraction,
        lmbda=config.lmbda,
        learning_rate=config.learning_rate,
        epsilon=config.epsilon,
        attack_learning_rate=config.attack_learning_rate,
        patch_size=config.patch_size,
        seed=config.seed,
        checkpoint_interval=config.checkpoint_interval,
        checkpoint_dir=config.output_dir,
    )
    write_run_config(config, config.output_dir, "finetune")

    finetuned = adversarial_finetune(model, sampler, spec, log_dir=config.output_dir, progress=True)
    path = save_checkpoint(finetuned, config.output_dir, step=config.iterations)
    logger.info(f"Finetuned checkpoint written to {path}")
    return 0


def run_recompress(args: argparse.Namespace) -> int:
    config = resolve_config(RecompressConfig, args.config, _cli_values(args, RecompressConfig))
    models = dict(zip((Path(p).stem for p in config.checkpoints), _load_models(config.checkpoints, config)))
    x = _load_input(config.image, config)
    write_run_config(config, config.output_dir, "recompress")

    report = recompression_study(
        x, models, rounds=config.rounds, image_id=Path(config.image).stem,
        include_jpeg=config.jpeg, jpeg_quality=config.jpeg_quality, float_chain=config.float_chain,
    )
    report.provenance = _provenance(config, config.checkpoints, jpeg_quality=str(config.jpeg_quality))
    ReportWriter(config.output_dir).write(report)
    if config.plot:
        plots.plot_recompression(report, str(Path(config.output_dir) / "recompression.png"))
    return 0


def run_eval(args: argparse.Namespace) -> int:
    config = resolve_config(EvalConfig, args.config, _cli_values(args, EvalConfig))
    baseline, finetuned = _load_models([config.baseline, config.finetuned], config)
    image_ids, images = _eval_images(config.eval_dir, config.limit, config)
    spec = _attack_spec(config, distance_kind=config.distance)
    write_run_config(config, config.output_dir, "eval")

    report = evaluate_defense(baseline, finetuned, images, spec, image_ids=image_ids)
    report.provenance = _provenance(config, [config.baseline, config.finetuned])
    ReportWriter(config.output_dir).write(report)
    return 0


def run_rd_curve(args: argparse.Namespace) -> int:
    config = resolve_config(RDCurveConfig, args.config, _cli_values(args, RDCurveConfig))
    families = {"baseline": _load_models(config.baseline, config)}
    if config.finetuned:
        families["finetuned"] = _load_models(config.finetuned, config)
    _, images = _eval_images(config.eval_dir, config.limit, config)
    write_run_config(config, config.output_dir, "rd-curve")

    report = rd_curve(families, images)
    report.provenance = _provenance(config, config.baseline + config.finetuned)
    ReportWriter(config.output_dir).write(report)
    if config.plot:
        plots.plot_rd_curve(report, str(Path(config.output_dir) / "rd_curve.png"))
    return 0


def run_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(SweepConfig, args.config, _cli_values(args, SweepConfig))
    models = _load_models(config.checkpoints, config)
    x = _load_input(config.image, config)
    spec = _attack_spec(config, distance_kind=config.distance)
    image_id = Path(config.image).stem
    write_run_config(config, config.output_dir, "sweep")

    if config.kind == "epsilon":
        report = epsilon_sweep(x, models[0], config.epsilons, spec, image_id=image_id)
    elif config.kind == "quality":
        report = quality_sweep(x, models, spec, image_id=image_id,
                               model_ids=[Path(p).stem for p in config.checkpoints])
    else:
        report = distance_ablation(x, models[0], spec, image_id=image_id)
    report.provenance = _provenance(config, config.checkpoints)
    ReportWriter(config.output_dir).write(report)
    return 0


def run_targeted(args: argparse.Namespace) -> int:
    config = resolve_config(TargetedConfig, args.config, _cli_values(args, TargetedConfig))
    model = _load_models([config.checkpoint], config)[0]
    x = _load_input(config.image, config)
    target = _load_input(config.target, config)
    mask = load_mask(config.mask) if config.mask else None
    if config.compare_weights and mask is None:
        raise ConfigError("--compare-weights needs a mask")
    spec = _attack_spec(
        config,
        mode="masked_targeted" if mask is not None else "targeted",
        target=target,
        mask=mask,
        lambda_bkg=config.lambda_bkg,
    )
    spec.check_against(x)
    write_run_config(config, config.output_dir, "targeted")

    result, report = targeted_demo(x, target, model, spec, image_id=Path(config.image).stem)
    report.provenance = _provenance(config, [config.checkpoint], target=config.target)
    writer = ReportWriter(config.output_dir)
    writer.write(report)
    export_adversarial(result, config.output_dir, Path(config.image).stem)
    plots.save_image_grid(
        [x, target, result.original_reconstruction, result.adversarial_example, result.adv_reconstruction],
        str(Path(config.output_dir) / "targeted_grid.png"),
        titles=["source", "target", "source recon", "adversarial", "adversarial recon"],
    )
    if config.compare_weights:
        comparison = mask_weight_comparison(
            x, target, mask, model, spec, weights=(config.lambda_bkg, math.inf), image_id=Path(config.image).stem
        )
        comparison.provenance = _provenance(config, [config.checkpoint])
        writer.write(comparison)
    return 0


def run_inspect(args: argparse.Namespace) -> int:
    config = resolve_config(InspectConfig, args.config, _cli_values(args, InspectConfig))
    model = _load_models([config.checkpoint], config)[0]
    x = _load_input(config.image, config)
    for channel in config.channels or []:
        if not 0 <= channel < model.latent_channels:
            raise ParameterError(f"Latent channel {channel} out of range 0..{model.latent_channels - 1}")
    stem = Path(config.image).stem
    output_dir = Path(config.output_dir)
    write_run_config(config, config.output_dir, "inspect")

    if config.kind == "noise-inversion":
        result = noise_inversion_probe(
            x, model, steps=config.steps, learning_rate=config.learning_rate or 1e-2, seed=config.seed
        )
        save_image(result.noise, output_dir / f"{stem}_noise.png")
        save_image(result.noise_reconstruction, output_dir / f"{stem}_noise_reconstruction.png")
        report = ExperimentReport(experiment_id="noise_inversion", provenance=_provenance(config, [config.checkpoint]))
        report.append_row(ReportRow.from_metrics(
            metric_report(result.image_reconstruction, result.noise_reconstruction, result.noise_bpp),
            stem, "model", "noise_inversion",
            extra={
                "input_psnr_db": report_psnr(result.input_psnr),
                "final_loss": result.loss_trace[-1] if result.loss_trace else 0.0,
            },
        ))
        ReportWriter(config.output_dir).write(report)
        return 0

    spec = _attack_spec(config)
    attacked = generate_adversarial(x, model, spec, progress=True)
    histograms = latent_histograms(x, attacked.adversarial_example, model, channels=config.channels, bins=config.bins)
    histograms["provenance"] = _provenance(config, [config.checkpoint]).model_dump()
    with open(output_dir / "latent_histograms.json", "w", encoding="utf-8") as f:
        json.dump(histograms, f, sort_keys=True, indent=2)
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with config values; flags override it")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--device")
    parser.add_argument("--precision", choices=["float32", "float64"])


def _add_dataset(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", help="image directory or 'synthetic'")
    parser.add_argument("--synthetic-count", dest="synthetic_count", type=int)
    parser.add_argument("--synthetic-size", dest="synthetic_size", type=int)


def _add_attack_flags(parser: argparse.ArgumentParser, distance: bool = True) -> None:
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    if distance:
        parser.add_argument("--distance", choices=["l2", "l1", "ms_ssim"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nicguard", description="Adversarial robustness toolkit for learned image codecs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline codec")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--mode", choices=["factorized", "hyperprior"])
    p.add_argument("--lmbda", type=float)
    p.add_argument("--distortion", choices=["mse", "ms_ssim"])
    p.add_argument("--channels", type=int)
    p.add_argument("--latent-channels", dest="latent_channels", type=int)
    p.add_argument("--num-stages", dest="num_stages", type=int)
    p.add_argument("--hyper-channels", dest="hyper_channels", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--log-interval", dest="log_interval", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.set_defaults(handler=run_train)

    p = sub.add_parser("attack", help="untargeted attack on one image")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    _add_attack_flags(p)
    p.add_argument("--init-amplitude", dest="init_amplitude", type=float)
    p.set_defaults(handler=run_attack)

    p = sub.add_parser("finetune", help="iterative adversarial finetuning")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--attack-steps", dest="attack_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--clean-fraction", dest="clean_fraction", type=float)
    p.add_argument("--lmbda", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--attack-learning-rate", dest="attack_learning_rate", type=float)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.set_defaults(handler=run_finetune)

    p = sub.add_parser("recompress", help="repeated compression of one image")
    _add_common(p)
    p.add_argument("--checkpoint", dest="checkpoints", action="append")
    p.add_argument("--image")
    p.add_argument("--rounds", type=int)
    p.add_argument("--float-chain", dest="float_chain", action="store_true", default=None)
    p.add_argument("--no-jpeg", dest="jpeg", action="store_false", default=None)
    p.add_argument("--jpeg-quality", dest="jpeg_quality", type=int)
    p.add_argument("--plot", action="store_true", default=None)
    p.set_defaults(handler=run_recompress)

    p = sub.add_parser("eval", help="compare a baseline and a finetuned codec")
    _add_common(p)
    p.add_argument("--baseline")
    p.add_argument("--finetuned")
    p.add_argument("--eval-dir", dest="eval_dir")
    p.add_argument("--limit", type=int)
    _add_attack_flags(p)
    p.set_defaults(handler=run_eval)

    p = sub.add_parser("rd-curve", help="rate-distortion points per model family")
    _add_common(p)
    p.add_argument("--baseline", nargs="+")
    p.add_argument("--finetuned", nargs="+")
    p.add_argument("--eval-dir", dest="eval_dir")
    p.add_argument("--limit", type=int)
    p.add_argument("--plot", action="store_true", default=None)
    p.set_defaults(handler=run_rd_curve)

    p = sub.add_parser("sweep", help="epsilon, quality or distance sweep")
    _add_common(p)
    p.add_argument("--kind", choices=["epsilon", "quality", "distance"])
    p.add_argument("--checkpoint", dest="checkpoints", action="append")
    p.add_argument("--image")
    p.add_argument("--epsilons", nargs="+", type=float)
    _add_attack_flags(p)
    p.set_defaults(handler=run_sweep)

    p = sub.add_parser("targeted", help="targeted or ROI-masked targeted attack")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--target")
    p.add_argument("--mask", help="grayscale PNG, bright pixels are the ROI")
    p.add_argument("--lambda-bkg", dest="lambda_bkg", type=float)
    _add_attack_flags(p, distance=False)
    p.add_argument("--compare-weights", dest="compare_weights", action="store_true", default=None)
    p.set_defaults(handler=run_targeted)

    p = sub.add_parser("inspect", help="noise inversion or latent histograms for one image")
    _add_common(p)
    p.add_argument("--kind", choices=["noise-inversion", "latent-histograms"])
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    _add_attack_flags(p, distance=False)
    p.add_argument("--channels", nargs="+", type=int, help="latent channels to histogram, all by default")
    p.add_argument("--bins", type=int)
    p.set_defaults(handler=run_inspect)

    return parser


def _report_error(error: Dict[str, Any]) -> None:
    print(json.dumps(error, sort_keys=True, default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging()
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except USAGE_ERRORS as e:
        _report_error(e.to_record())
        return 2
    except NICGuardError as e:
        _report_error(e.to_record())
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed")
        _report_error({"error": type(e).__name__, "message": str(e)})
        return 1
