"""Точка входа командной строки: zest synth|train|finetune|render|eval|crossval"""

import argparse
import csv
import logging
import logging.handlers
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config.settings import settings
from zest.data_io import (
    SceneBundle,
    generate_synthetic,
    load_image,
    load_scene,
    render_filename,
    save_render,
    save_scene,
)
from zest.errors import EXIT_OK, ConfigError, DataError, exit_code_for
from zest.losses import TERM_NAMES, LossReport
from zest.metrics import (
    LpipsHook,
    evaluate_sequence,
    format_crossval_table,
    format_table,
    write_crossval_csv,
    write_csv,
)
from zest.models import RunConfig, SyntheticSceneSpec
from zest.renderer import RenderMode
from zest.run_log import RunLedger
from zest.trainer import (
    Checkpoint,
    RayBatch,
    cross_validate,
    finetune,
    fit,
    network_from_checkpoint,
    render_frames,
)
from zest.utils import model_from_flat, parse_flat, save_config

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved.cfg"
LOSS_CSV = "loss.csv"
_RENDER_NAME = re.compile(r"^render_v(\d+)_t(\d+)\.png$")


def setup_logging():
    """Настройка логирования с файловым выводом и ротацией"""
    log_level = settings.log_level
    log_file = settings.log_file

    # Создаем директорию для логов если её нет
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)

    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    date_format = "%Y-%m-%d %H:%M:%S"
    level = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()

    if log_file:
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=settings.log_max_bytes,
            backupCount=settings.log_backup_count,
            encoding="utf-8",
        )
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(log_format, date_format))
        root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(log_format, date_format))
    root_logger.addHandler(console_handler)


def parse_index_list(text: str) -> List[int]:
    """'0,2,5-7' → [0, 2, 5, 6, 7]"""
    indices: List[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                indices.extend(range(lo, hi + 1))
            else:
                indices.append(int(part))
        except ValueError as e:
            raise ConfigError(f"bad index list '{text}'") from e
    return indices


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Файл конфига + флаги командной строки → проверенный RunConfig"""
    flat: Dict[str, str] = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        flat = parse_flat(text, str(config_path))
        # decay_steps пересчитывается из total_steps, если его не задали явно
        if flat.get("loss_weights.decay_steps") == "":
            del flat["loss_weights.decay_steps"]

    overrides = {
        "seed": getattr(args, "seed", None),
        "total_steps": getattr(args, "steps", None),
        "mode": getattr(args, "mode", None),
        "out_dir": getattr(args, "out", None),
    }
    for key, value in overrides.items():
        if value is not None:
            flat[key] = str(value)
    scenes = getattr(args, "scene", None)
    # finetune принимает одну сцену, train и crossval: список
    if isinstance(scenes, list) and scenes:
        flat["scenes"] = ",".join(scenes)
    if getattr(args, "ssim_literal", False):
        flat["ssim_literal"] = "true"
    if getattr(args, "no_geometry_volume", False):
        flat["use_geometry_volume"] = "false"
    if getattr(args, "no_motion_volume", False):
        flat["use_motion_volume"] = "false"
    if getattr(args, "resume", None):
        flat["resume"] = args.resume
    return model_from_flat(RunConfig, flat)


def _load_scenes(paths: Sequence[str]) -> List[SceneBundle]:
    if not paths:
        raise ConfigError("no scenes given (use --scene or 'scenes' in the config)", key="scenes")
    return [load_scene(p) for p in paths]


class LossLog:
    """CSV по шагам: step, scene, frame, total и компоненты"""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        exists = append and path.exists()
        self._handle = path.open("a" if exists else "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle)
        if not exists:
            self._writer.writerow(["step", "scene_id", "target_frame", "total", *TERM_NAMES])
        self.rows = 0

    def __call__(self, step: int, report: LossReport, batch: RayBatch) -> None:
        values = report.values()
        self._writer.writerow(
            [
                step,
                batch.scene_id,
                batch.time_index,
                float(report.total.detach()),
                *("" if name not in values else values[name] for name in TERM_NAMES),
            ]
        )
        self._handle.flush()
        self.rows += 1

    def close(self) -> None:
        self._handle.close()


def cmd_synth(args: argparse.Namespace) -> int:
    flat: Dict[str, str] = {}
    if args.config:
        flat = parse_flat(Path(args.config).read_text(encoding="utf-8"), args.config)
    for key, value in (
        ("scene_id", args.scene_id),
        ("n_frames", args.frames),
        ("height", args.height),
        ("width", args.width),
        ("n_cameras", args.cameras),
        ("texture_seed", args.seed),
    ):
        if value is not None:
            flat[key] = str(value)
    if args.static:
        flat["static"] = "true"
    spec = model_from_flat(SyntheticSceneSpec, flat)
    out = Path(args.out)
    bundle = generate_synthetic(spec)
    save_scene(bundle, out)
    save_config(spec, str(out / RESOLVED_CONFIG))
    print(f"Synthetic scene '{spec.scene_id}' written to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    save_config(config, str(out / RESOLVED_CONFIG))
    scenes = _load_scenes(config.scenes)
    resume = Checkpoint.load(config.resume) if config.resume else None
    loss_log = LossLog(out / LOSS_CSV, append=resume is not None)
    try:
        checkpoint = fit(
            scenes,
            config.train_config(),
            checkpoint_dir=str(out / "checkpoints"),
            resume=resume,
            ledger=RunLedger(),
            run_name=out.name,
            on_step=loss_log,
        )
    finally:
        loss_log.close()
    print(f"Trained to step {checkpoint.step}; checkpoint {out / 'checkpoints' / 'last.zip'}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.ckpt)
    config = resolve_config(args) if args.config else None
    train_config = config.train_config() if config else checkpoint.config
    if args.seed is not None and config is None:
        train_config = train_config.model_copy(update={"seed": args.seed})
    out = Path(args.out)
    scene = load_scene(args.scene)
    steps = args.steps if args.steps is not None else train_config.finetune_steps
    save_config(train_config, str(out / RESOLVED_CONFIG))
    loss_log = LossLog(out / LOSS_CSV)
    try:
        tuned = finetune(
            checkpoint,
            scene,
            train_config,
            steps=steps,
            checkpoint_dir=str(out / "checkpoints"),
            on_step=loss_log,
        )
    finally:
        loss_log.close()
    if tuned is checkpoint:
        checkpoint.save(out / "checkpoints" / "last.zip")
    print(f"Fine-tuned {scene.scene_id} for {steps} steps")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.ckpt)
    config = checkpoint.config.model_copy(
        update={
            "use_geometry_volume": checkpoint.config.use_geometry_volume and not args.no_geometry_volume,
            "use_motion_volume": checkpoint.config.use_motion_volume and not args.no_motion_volume,
        }
    )
    scene = load_scene(args.scene)
    network = network_from_checkpoint(checkpoint, config)
    times = parse_index_list(args.times) if args.times else list(range(scene.n_frames))
    views: Optional[List[int]] = parse_index_list(args.views) if args.views else None
    for index in times + (views or []):
        if not 0 <= index < scene.n_frames:
            raise DataError(f"{scene.scene_id}: index {index} outside 0..{scene.n_frames - 1}")
    mode = RenderMode(args.mode)
    out = Path(args.out)
    save_config(config, str(out / RESOLVED_CONFIG))
    written = 0
    for view in views if views is not None else [None]:
        renders = render_frames(network, scene, config, times, mode=mode, view=view)
        for t, images in renders.items():
            save_render(images["color"], out / render_filename(t if view is None else view, t))
            written += 1
    print(f"{written} render(s) written to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    renders_dir = Path(args.renders)
    if not renders_dir.is_dir():
        raise DataError(f"{renders_dir}: renders directory not found")
    pairs = []
    skipped = 0
    for path in sorted(renders_dir.iterdir()):
        match = _RENDER_NAME.match(path.name)
        if not match:
            continue
        view, t = int(match.group(1)), int(match.group(2))
        if view != t or t >= scene.n_frames:
            logger.debug(f"{path.name}: no ground truth for view {view} at time {t}")
            skipped += 1
            continue
        pairs.append((path, t))
    if skipped:
        logger.warning(f"⚠️  Skipped {skipped} render(s) without ground truth in {renders_dir}")
    if not pairs:
        raise DataError(f"{renders_dir}: no renders with ground truth")
    report = evaluate_sequence(
        [load_image(p) for p, _ in pairs],
        [scene.frames[t] for _, t in pairs],
        names=[p.stem for p, _ in pairs],
        literal=args.ssim_literal,
        lpips=LpipsHook(),
    )
    print(format_table(report))
    write_csv(report, Path(args.out or renders_dir) / "metrics.csv")
    return EXIT_OK


def cmd_crossval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    save_config(config, str(out / RESOLVED_CONFIG))
    scenes = _load_scenes(config.scenes)
    rows = cross_validate(
        scenes,
        config.train_config(),
        ledger=RunLedger(),
        literal=config.ssim_literal,
        lpips=LpipsHook(),
        checkpoint_dir=str(out / "folds"),
    )
    print(format_crossval_table(rows))
    write_crossval_csv(rows, out / "crossval.csv")
    return EXIT_OK


def _add_ablation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-geometry-volume", action="store_true", help="zero the geometry volume features")
    parser.add_argument("--no-motion-volume", action="store_true", help="zero the motion volume features")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zest", description="Scene-agnostic dynamic novel view synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic scene")
    synth.add_argument("--out", required=True)
    synth.add_argument("--config")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--static", action="store_true", help="motionless object (zero flow)")
    synth.add_argument("--scene-id")
    synth.add_argument("--frames", type=int)
    synth.add_argument("--height", type=int)
    synth.add_argument("--width", type=int)
    synth.add_argument("--cameras", type=int)
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", help="scene-agnostic training")
    train.add_argument("--config")
    train.add_argument("--scene", action="append")
    train.add_argument("--out")
    train.add_argument("--seed", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--resume", help="checkpoint to continue from")
    _add_ablation_flags(train)
    train.set_defaults(handler=cmd_train)

    tune = sub.add_parser("finetune", help="scene-specific fine-tuning")
    tune.add_argument("--ckpt", required=True)
    tune.add_argument("--scene", required=True)
    tune.add_argument("--out", required=True)
    tune.add_argument("--config")
    tune.add_argument("--seed", type=int)
    tune.add_argument("--steps", type=int)
    tune.set_defaults(handler=cmd_finetune)

    render = sub.add_parser("render", help="render (view, time) pairs")
    render.add_argument("--ckpt", required=True)
    render.add_argument("--scene", required=True)
    render.add_argument("--out", required=True)
    render.add_argument("--views", help="camera indices, e.g. 0,2,4-6 (default: camera of each time)")
    render.add_argument("--times", help="frame indices (default: all)")
    render.add_argument("--mode", choices=[m.value for m in RenderMode], default=RenderMode.BLEND.value)
    _add_ablation_flags(render)
    render.set_defaults(handler=cmd_render)

    evaluate = sub.add_parser("eval", help="metrics of renders against the scene")
    evaluate.add_argument("--renders", required=True)
    evaluate.add_argument("--scene", required=True)
    evaluate.add_argument("--out")
    evaluate.add_argument("--ssim-literal", action="store_true")
    evaluate.set_defaults(handler=cmd_eval)

    crossval = sub.add_parser("crossval", help="leave-one-out cross-validation")
    crossval.add_argument("--config")
    crossval.add_argument("--scene", action="append")
    crossval.add_argument("--out")
    crossval.add_argument("--seed", type=int)
    crossval.add_argument("--steps", type=int)
    crossval.add_argument("--ssim-literal", action="store_true")
    _add_ablation_flags(crossval)
    crossval.set_defaults(handler=cmd_crossval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()
    try:
        return args.handler(args)
    except Exception as e:
        return exit_code_for(e, operation=args.command)


if __name__ == "__main__":
    sys.exit(main())
