#!/usr/bin/env python3
"""
Настольные эксперименты на синтетических сценах:
overfit на одной сцене, порядок абляций объёмов и перенос на невиданную сцену
"""
import argparse
import sys
from pathlib import Path
from typing import Dict, List

# Добавляем корневую директорию в путь
sys.path.insert(0, str(Path(__file__).parent.parent))

from zest.cli import setup_logging
from zest.data_io import generate_synthetic
from zest.metrics import masked_psnr
from zest.models import SyntheticSceneSpec, TrainConfig
from zest.renderer import RenderMode
from zest.trainer import evaluate_scene, finetune, fit, network_from_checkpoint, render_frames


def toy_config(steps: int, seed: int, **overrides) -> TrainConfig:
    base = dict(
        keyframe_count=4,
        samples_per_ray=32,
        ray_batch=256,
        depth_planes=16,
        total_steps=steps,
        log_every=max(1, steps // 20),
        checkpoint_every=max(1, steps),
        eval_frames=3,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def toy_spec(scene_id: str, height: int, width: int, texture_seed: int) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(scene_id=scene_id, height=height, width=width, texture_seed=texture_seed)


def run_overfit(args) -> float:
    scene = generate_synthetic(toy_spec("toy", args.height, args.width, 0))
    config = toy_config(args.steps, args.seed)
    checkpoint = fit([scene], config)
    report = evaluate_scene(network_from_checkpoint(checkpoint, config), scene, config)
    print(f"overfit: PSNR {report.psnr:.2f} SSIM {report.ssim:.4f}")
    if args.calibration_psnr is not None:
        gap = args.calibration_psnr - report.psnr
        status = "OK" if gap <= 3.0 else "FAIL"
        print(f"overfit vs calibration {args.calibration_psnr:.2f}: gap {gap:.2f} dB [{status}]")
    return report.psnr


def run_ablation(args) -> Dict[str, float]:
    scene = generate_synthetic(toy_spec("toy", args.height, args.width, 0))
    variants = {
        "neither": dict(use_geometry_volume=False, use_motion_volume=False),
        "geometry-only": dict(use_geometry_volume=True, use_motion_volume=False),
        "dynamic-only": dict(use_geometry_volume=False, use_motion_volume=True),
        "full": dict(use_geometry_volume=True, use_motion_volume=True),
    }
    results: Dict[str, float] = {}
    for name, flags in variants.items():
        config = toy_config(args.steps, args.seed, **flags)
        checkpoint = fit([scene], config)
        results[name] = evaluate_scene(network_from_checkpoint(checkpoint, config), scene, config).psnr
        print(f"ablation {name:<14} PSNR {results[name]:.2f}")
    ordered = results["full"] >= results["dynamic-only"] >= results["geometry-only"] >= results["neither"]
    margin = results["full"] - results["neither"]
    print(f"ablation ordering {'OK' if ordered else 'FAIL'}; full − neither = {margin:.2f} dB")
    return results


def run_zero_shot(args) -> float:
    train_scenes = [
        generate_synthetic(toy_spec(f"train{i}", args.height, args.width, i + 1)) for i in range(3)
    ]
    unseen = generate_synthetic(toy_spec("unseen", args.height, args.width, 100))
    config = toy_config(args.steps, args.seed)
    checkpoint = fit(train_scenes, config)
    if args.finetune_steps:
        checkpoint = finetune(checkpoint, unseen, config, steps=args.finetune_steps)
    network = network_from_checkpoint(checkpoint, config)
    frames = list(range(1, unseen.n_frames - 1, 3))
    gains: List[float] = []
    blend = render_frames(network, unseen, config, frames, RenderMode.BLEND)
    static = render_frames(network, unseen, config, frames, RenderMode.STATIC)
    for t in frames:
        mask = unseen.masks[t]
        if not bool(mask.any()):
            continue
        gains.append(
            masked_psnr(blend[t]["color"], unseen.frames[t], mask)
            - masked_psnr(static[t]["color"], unseen.frames[t], mask)
        )
    gain = sum(gains) / max(1, len(gains))
    print(f"zero-shot: blend − static masked PSNR = {gain:.2f} dB [{'OK' if gain >= 1.0 else 'FAIL'}]")
    return gain


def main():
    parser = argparse.ArgumentParser(description="Desk-scale experiments on synthetic scenes")
    parser.add_argument("experiment", choices=["overfit", "ablation", "zeroshot", "all"])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--height", type=int, default=24)
    parser.add_argument("--width", type=int, default=32)
    parser.add_argument("--calibration-psnr", type=float, help="reference PSNR of the calibration run")
    parser.add_argument("--finetune-steps", type=int, default=0)
    args = parser.parse_args()

    setup_logging()
    if args.experiment in ("overfit", "all"):
        run_overfit(args)
    if args.experiment in ("ablation", "all"):
        run_ablation(args)
    if args.experiment in ("zeroshot", "all"):
        run_zero_shot(args)


if __name__ == "__main__":
    main()
