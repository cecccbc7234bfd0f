#!/usr/bin/env python3
"""
Desk-scale acceptance run for nicguard
Trains a toy codec, attacks it, finetunes it and checks that every study moves
in the expected direction. Writes one report per study plus a summary.

    python acceptance_suite.py --output-dir acceptance_outputs
    python acceptance_suite.py --quick        # minutes instead of hours
"""

import argparse
import json
import math
import os
import sys
import time

import numpy as np
import torch

from backend.attack import AttackSpec, generate_adversarial
from backend.checkpoints import file_hash, load_checkpoint, save_checkpoint
from backend.config import TrainConfig, configure_logging
from backend.datasets import center_mask, synthetic_digits, synthetic_images
from backend.defense import FinetuneSpec, adversarial_finetune, evaluate_defense
from backend.experiments import mask_weight_comparison, mean_rd_loss, recompression_study, targeted_demo
from backend.metrics import report_psnr
from backend.reports import ExperimentReport, Provenance, ReportRow, ReportWriter
from backend.trainer import train_baseline

FULL = {
    "channels": 128, "train_steps": 20000, "train_images": 64, "eval_images": 16, "size": 64,
    "attack_steps": 10000, "finetune_iterations": 200, "finetune_attack_steps": 1000,
    "rounds": 50, "digit_pairs": 10,
}
QUICK = {
    "channels": 32, "train_steps": 300, "train_images": 16, "eval_images": 4, "size": 64,
    "attack_steps": 200, "finetune_iterations": 10, "finetune_attack_steps": 50,
    "rounds": 10, "digit_pairs": 4,
}


def check(results, name, passed, **values):
    results[name] = {"passed": bool(passed), **values}
    print(f"{'✅' if passed else '❌'} {name}: " + ", ".join(f"{k}={v}" for k, v in values.items()))


def untargeted_efficacy(model, eval_set, spec, results, writer):
    """Attacks lower reconstruction PSNR by at least 5 dB"""
    report = ExperimentReport(experiment_id="acceptance_attack", provenance=Provenance(spec=spec.model_dump()))
    drops = []
    for index, x in enumerate(eval_set):
        result = generate_adversarial(x, model, spec)
        clean_psnr = report_psnr(result.original_metrics.psnr_db)
        adv_psnr = report_psnr(result.metrics.psnr_db)
        drops.append(clean_psnr - adv_psnr)
        report.append_row(ReportRow.from_metrics(
            result.metrics, f"eval_{index:03d}", "baseline", "attacked",
            budget_satisfied=result.budget_satisfied,
            extra={"clean_psnr_db": clean_psnr, "input_psnr_db": report_psnr(result.input_psnr)},
        ))
    writer.write(report)
    share = float(np.mean([d >= 5.0 for d in drops]))
    check(results, "attack_efficacy", np.mean(drops) >= 5.0 and share >= 0.8,
          mean_drop_db=round(float(np.mean(drops)), 3), share_over_5db=share)


def defense_efficacy(baseline, finetuned, eval_set, spec, results, writer):
    report = evaluate_defense(baseline, finetuned, eval_set, spec, experiment_id="acceptance_defense")
    writer.write(report)
    attacked = {
        model_id: float(np.mean([r.psnr_db for r in report.select(model_id=model_id, condition="attacked")]))
        for model_id in ("baseline", "finetuned")
    }
    gain = attacked["finetuned"] - attacked["baseline"]
    check(results, "defense_efficacy", gain >= 3.0, attacked_psnr_gain_db=round(gain, 3))


def rd_retention(baseline, finetuned, eval_set, results):
    before, after = mean_rd_loss(baseline, eval_set), mean_rd_loss(finetuned, eval_set)
    change = (after - before) / before
    check(results, "rd_retention", abs(change) <= 0.10,
          baseline_rd_loss=round(before, 5), finetuned_rd_loss=round(after, 5), relative_change=round(change, 4))


def recompression(baseline, finetuned, eval_set, rounds, results, writer):
    report = ExperimentReport(experiment_id="acceptance_recompression")
    for index, x in enumerate(eval_set):
        recompression_study(
            x, {"baseline": baseline, "finetuned": finetuned}, rounds=rounds,
            image_id=f"eval_{index:03d}", include_jpeg=False, report=report,
        )
    writer.write(report)
    last = {
        model_id: float(np.mean([r.psnr_db for r in report.select(model_id=model_id, round=rounds)]))
        for model_id in ("baseline", "finetuned")
    }
    gain = last["finetuned"] - last["baseline"]
    check(results, "recompression", gain >= 2.0, rounds=rounds, final_round_gain_db=round(gain, 3))


def targeted_direction(model, digits, steps, pairs, results, writer):
    report = ExperimentReport(experiment_id="acceptance_targeted")
    closer = []
    roi_weighted, roi_projected = [], []
    mask = center_mask(*digits[0].shape[-2:])
    for index in range(pairs):
        source, target = digits[index % 10], digits[(index + 1) % 10]
        spec = AttackSpec(mode="targeted", target=target, steps=steps, epsilon=1e-3, seed=index)
        demo_id = f"digit{index % 10}_to_{(index + 1) % 10}"
        _, report = targeted_demo(source, target, model, spec, image_id=demo_id, report=report)
        extra = report.rows[-1].extra
        closer.append(extra["distance_to_target"] < extra["distance_to_source"])

        comparison = mask_weight_comparison(
            source, target, mask, model,
            AttackSpec(steps=steps, epsilon=1e-3, seed=index), weights=(0.1, math.inf), image_id=demo_id,
        )
        weighted, projected = comparison.select(condition="attacked")
        roi_weighted.append(weighted.extra["roi_distance_to_target"])
        roi_projected.append(projected.extra["roi_distance_to_target"])
        report.extend(comparison.rows)
    writer.write(report)
    share = float(np.mean(closer))
    check(results, "targeted_direction", share >= 0.8, share_closer_to_target=share)
    check(results, "masked_weighting", np.mean(roi_weighted) < np.mean(roi_projected),
          roi_distance_weighted=round(float(np.mean(roi_weighted)), 6),
          roi_distance_projected=round(float(np.mean(roi_projected)), 6))


def determinism(checkpoint, x, spec, reference_noise, results):
    """Reload the checkpoint and rerun the first attack from its recorded spec"""
    model, _ = load_checkpoint(checkpoint)
    rerun = generate_adversarial(x, model, AttackSpec(**spec.model_dump()))
    check(results, "determinism", torch.equal(rerun.noise, reference_noise))


def main(argv=None):
    parser = argparse.ArgumentParser(description="Desk-scale acceptance run")
    parser.add_argument("--output-dir", default="acceptance_outputs")
    parser.add_argument("--quick", action="store_true", help="small settings for a smoke run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    configure_logging()
    scale = QUICK if args.quick else FULL
    start = time.time()

    print("🛡️  nicguard acceptance run")
    print("=" * 60)
    print(f"Settings: {'quick' if args.quick else 'full'} {json.dumps(scale)}")
    writer = ReportWriter(args.output_dir)
    results = {}

    print("\n🔄 Training the baseline codec...")
    config = TrainConfig(
        output_dir=os.path.join(args.output_dir, "baseline"),
        seed=args.seed,
        device=args.device,
        synthetic_count=scale["train_images"],
        synthetic_size=scale["size"],
        channels=scale["channels"],
        latent_channels=scale["channels"],
        steps=scale["train_steps"],
        patch_size=scale["size"],
    )
    checkpoint = train_baseline(config, progress=True)
    baseline, _ = load_checkpoint(checkpoint, device=args.device)
    eval_set = [x.to(args.device) for x in synthetic_images(scale["eval_images"], scale["size"], seed=args.seed + 1)]

    attack_spec = AttackSpec(steps=scale["attack_steps"], epsilon=1e-3, seed=args.seed)
    print("\n🎯 Untargeted attack on the baseline...")
    untargeted_efficacy(baseline, eval_set, attack_spec, results, writer)

    print("\n🔄 Adversarial finetuning...")
    finetune_spec = FinetuneSpec(
        iterations=scale["finetune_iterations"],
        attack_steps=scale["finetune_attack_steps"],
        patch_size=scale["size"],
        seed=args.seed,
    )
    train_set = synthetic_images(scale["train_images"], scale["size"], seed=args.seed)
    finetuned = adversarial_finetune(
        baseline, train_set, finetune_spec, log_dir=os.path.join(args.output_dir, "finetuned"), progress=True
    )
    finetuned_checkpoint = save_checkpoint(finetuned, os.path.join(args.output_dir, "finetuned"),
                                           step=finetune_spec.iterations)

    print("\n🛡️  Defense, RD retention and recompression...")
    defense_efficacy(baseline, finetuned, eval_set, attack_spec, results, writer)
    rd_retention(baseline, finetuned, eval_set, results)
    recompression(baseline, finetuned, eval_set, scale["rounds"], results, writer)

    print("\n🔢 Targeted attacks on digits...")
    digits = [d.to(args.device) for d in synthetic_digits(size=32, seed=args.seed)]
    targeted_direction(baseline, digits, scale["attack_steps"], scale["digit_pairs"], results, writer)

    print("\n🔁 Determinism...")
    reference = generate_adversarial(eval_set[0], baseline, attack_spec)
    determinism(checkpoint, eval_set[0], attack_spec, reference.noise, results)

    summary = {
        "settings": scale,
        "seed": args.seed,
        "checkpoints": {path: file_hash(path) for path in (checkpoint, finetuned_checkpoint)},
        "results": results,
        "wall_time_s": round(time.time() - start, 1),
    }
    with open(os.path.join(args.output_dir, "acceptance_summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)

    passed = sum(r["passed"] for r in results.values())
    print("\n" + "=" * 60)
    print(f"📊 {passed}/{len(results)} checks passed in {summary['wall_time_s']} s")
    print(f"📁 Reports in {args.output_dir}")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
