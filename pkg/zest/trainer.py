"""
Выбор ключевых кадров и соседей, цикл оптимизации, дообучение,
leave-one-out кросс-валидация и чекпоинты
"""

import dataclasses
import io
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import torch

from config.settings import settings
from zest.camera_geometry import DepthPlaneSet, generate_rays, pixel_to_image
from zest.data_io import SceneBundle
from zest.errors import ConfigError, DataError, FormatError, LeakageError
from zest.losses import (
    LossReport,
    l_blend_entropy,
    l_cycle,
    l_depth,
    l_flow_min,
    l_flow_smooth_spatial,
    l_flow_smooth_temporal,
    l_geo,
    l_occ_reg,
    l_pho,
    l_rec,
    total_loss,
)
from zest.metrics import LpipsHook, evaluate_sequence
from zest.models import CrossValRow, MetricReport, TrainConfig
from zest.network import ZestNetwork
from zest.prefetch import RayBatchPrefetcher
from zest.renderer import (
    RenderContext,
    RenderMode,
    RenderResult,
    VolumeCache,
    render_image,
    render_rays,
)
from zest.run_log import RunLedger
from zest.utils import config_hash, format_flat, flatten_model, make_generator, model_from_flat, parse_flat

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "MANIFEST"
STATE_NAME = "state.pt"
CONFIG_NAME = "config.cfg"


def select_keyframes(n_frames: int, keyframe_count: int, stride: Optional[int] = None) -> List[int]:
    """
    Равномерно разнесённые ключевые кадры

    λ = floor(N / K) (или stride), индексы λ·j − 1 для j = 1..K.
    """
    if n_frames < keyframe_count:
        raise ConfigError(
            f"sequence has {n_frames} frames but keyframe_count is {keyframe_count}; "
            f"lower keyframe_count to at most {n_frames}",
            key="keyframe_count",
        )
    step = stride if stride is not None else n_frames // keyframe_count
    indices = [step * j - 1 for j in range(1, keyframe_count + 1)]
    if indices[-1] >= n_frames:
        raise ConfigError(
            f"keyframe_stride {step} × {keyframe_count} keyframes exceeds {n_frames} frames",
            key="keyframe_stride",
        )
    return indices


def neighbor_slots(time_index: int, n_frames: int, radius: int = 2) -> List[Optional[int]]:
    """Слоты соседей в порядке t−r..t−1, t+1..t+r; за границами последовательности None"""
    offsets = [o for o in range(-radius, radius + 1) if o != 0]
    return [time_index + o if 0 <= time_index + o < n_frames else None for o in offsets]


def select_neighbors(time_index: int, n_frames: int, radius: int = 2) -> List[int]:
    """{t−2, t−1, t+1, t+2} ∩ [0, N−1]"""
    return [i for i in neighbor_slots(time_index, n_frames, radius) if i is not None]


def keyframe_slots(
    n_frames: int, time_index: int, config: TrainConfig, exclude_target: bool = True
) -> List[Optional[int]]:
    """Ключевые кадры; целевой кадр убирается из собственного кондиционирования"""
    indices = select_keyframes(n_frames, config.keyframe_count, config.keyframe_stride)
    if not exclude_target or time_index not in indices:
        return list(indices)
    slots: List[Optional[int]] = [None if i == time_index else i for i in indices]
    if sum(s is not None for s in slots) < 2:
        return list(indices)
    return slots


def build_context(
    network: ZestNetwork,
    scene: SceneBundle,
    time_index: int,
    config: TrainConfig,
    cache: Optional[VolumeCache] = None,
    mode: RenderMode = RenderMode.BLEND,
    exclude_target: bool = True,
) -> RenderContext:
    """
    G по ключевым кадрам (опорная камера: средний ключевой кадр),
    M по соседям t (опорная камера: камера кадра t)
    """
    if not 0 <= time_index < scene.n_frames:
        raise DataError(f"{scene.scene_id}: time {time_index} outside 0..{scene.n_frames - 1}")
    planes = DepthPlaneSet.between(scene.near, scene.far, config.depth_planes, config.depth_spacing)

    key_indices = select_keyframes(scene.n_frames, config.keyframe_count, config.keyframe_stride)
    key_slots = keyframe_slots(scene.n_frames, time_index, config, exclude_target)
    keyframes = [scene.view(i) if i is not None else None for i in key_slots]
    geometry_ref = scene.cameras[key_indices[len(key_indices) // 2]]

    near_slots = neighbor_slots(time_index, scene.n_frames, config.neighbor_radius)
    neighbors = [scene.view(i) if i is not None else None for i in near_slots]

    def _cached(key, builder):
        if cache is None:
            return builder()
        return cache.get(key, builder)

    geometry = None
    if config.use_geometry_volume:
        geometry = _cached(
            ("geometry", scene.scene_id, tuple(key_slots), network.version),
            lambda: network.geometry_volume(keyframes, geometry_ref, planes),
        )
    motion = None
    if config.use_motion_volume:
        if sum(i is not None for i in near_slots) >= 2:
            motion = _cached(
                ("motion", scene.scene_id, time_index, network.version),
                lambda: network.motion_volume(neighbors, scene.cameras[time_index], planes),
            )
        else:
            logger.debug(f"{scene.scene_id}: fewer than 2 neighbors at t={time_index}, motion volume zeroed")

    return RenderContext(
        network=network,
        geometry=geometry,
        motion=motion,
        keyframes=keyframes,
        neighbors=neighbors,
        time_index=time_index,
        n_frames=scene.n_frames,
        samples_per_ray=config.samples_per_ray,
        mode=RenderMode(mode),
        spacing_aware_alpha=config.spacing_aware_alpha,
        pho_radius=config.pho_radius,
    )


@dataclass
class RayBatch:
    """Батч лучей одной сцены в один момент; pixels (R, 2): (row, col)"""

    scene_index: int
    scene_id: str
    time_index: int
    pixels: torch.Tensor
    # состояние генератора после выборки этого батча
    rng_state: torch.Tensor


def collect_terms(
    result: RenderResult,
    scene: SceneBundle,
    time_index: int,
    pixels: torch.Tensor,
    target: torch.Tensor,
) -> Dict[str, torch.Tensor]:
    """Все доступные компоненты потерь; недоступные (нет соседей, нет псевдо-GT) пропускаются"""
    if result.dynamic is None or result.static is None or result.sample_points is None:
        raise DataError("training render must be produced with auxiliary outputs")
    dynamic = result.dynamic
    rows, cols = pixels[:, 0].long(), pixels[:, 1].long()
    terms: Dict[str, torch.Tensor] = {
        "rec": l_rec(result.color_blend, target),
        "occ": l_occ_reg([dynamic.occ_fwd, dynamic.occ_bwd]),
        "blend": l_blend_entropy(result.static.blend),
        "flow_min": l_flow_min([dynamic.flow_fwd, dynamic.flow_bwd]),
        "flow_sp": l_flow_smooth_spatial([dynamic.flow_fwd, dynamic.flow_bwd], result.sample_points),
        "flow_temp": l_flow_smooth_temporal(dynamic.flow_fwd, dynamic.flow_bwd),
    }
    if result.warped:
        terms["pho"] = l_pho(result.warped, target, result.occlusion)
    if result.cycle:
        terms["cyc"] = l_cycle(result.cycle)

    if scene.has_flow and result.flow:
        pseudo = {}
        cameras = {}
        flows = {}
        for offset, flow in result.flow.items():
            u = scene.pseudo_flow(time_index, offset)
            if u is None:
                continue
            pseudo[offset] = u[rows, cols]
            cameras[offset] = scene.cameras[time_index + offset]
            flows[offset] = flow
        if flows:
            pixels_xy = pixel_to_image(pixels.to(result.point.dtype))
            terms["geo"] = l_geo(result.point, flows, cameras, pseudo, pixels_xy)
    if scene.has_depth:
        pseudo_depth = scene.depth[time_index][rows, cols].to(result.depth.dtype)
        terms["depth"] = l_depth(result.depth, pseudo_depth)
    return terms


@dataclass
class Checkpoint:
    """
    Все наборы параметров, состояние Adam, шаг, сид и хэш конфига

    Файл: zip-архив, MANIFEST (key = value), state.pt (тензоры), config.cfg.
    """

    step: int
    seed: int
    config: TrainConfig
    network_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    sampler_state: Optional[torch.Tensor] = None
    jitter_state: Optional[torch.Tensor] = None
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def manifest(self) -> Dict[str, str]:
        return {
            "format_version": str(self.format_version),
            "step": str(self.step),
            "seed": str(self.seed),
            "config_hash": self.config_hash,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buffer = io.BytesIO()
        torch.save(
            {
                "network": self.network_state,
                "optimizer": self.optimizer_state,
                "sampler": self.sampler_state,
                "jitter": self.jitter_state,
            },
            buffer,
        )
        manifest = "\n".join(f"{k} = {v}" for k, v in self.manifest().items()) + "\n"
        tmp = path.with_suffix(path.suffix + ".tmp")
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as archive:
            archive.writestr(MANIFEST_NAME, manifest)
            archive.writestr(STATE_NAME, buffer.getvalue())
            archive.writestr(CONFIG_NAME, format_flat(flatten_model(self.config)))
        tmp.replace(path)
        logger.info(f"✅ Checkpoint step {self.step} saved to {path}")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            with zipfile.ZipFile(path) as archive:
                manifest = parse_flat(archive.read(MANIFEST_NAME).decode("utf-8"), f"{path}:{MANIFEST_NAME}")
                config_text = archive.read(CONFIG_NAME).decode("utf-8")
                state = torch.load(io.BytesIO(archive.read(STATE_NAME)), map_location="cpu", weights_only=True)
        except (zipfile.BadZipFile, KeyError) as e:
            raise FormatError(str(path), f"not a checkpoint archive: {e}") from e
        version = int(manifest.get("format_version", "0"))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(str(path), f"unsupported checkpoint format {version}")
        config = model_from_flat(TrainConfig, parse_flat(config_text, f"{path}:{CONFIG_NAME}"))
        checkpoint = cls(
            step=int(manifest["step"]),
            seed=int(manifest["seed"]),
            config=config,
            network_state=state["network"],
            optimizer_state=state["optimizer"],
            sampler_state=state["sampler"],
            jitter_state=state["jitter"],
            format_version=version,
        )
        if checkpoint.config_hash != manifest.get("config_hash"):
            raise FormatError(str(path), "config hash does not match the stored config")
        return checkpoint


def network_from_checkpoint(checkpoint: Checkpoint, config: Optional[TrainConfig] = None) -> ZestNetwork:
    network = ZestNetwork(config or checkpoint.config).to(settings.device)
    try:
        network.load_state_dict(checkpoint.network_state)
    except RuntimeError as e:
        raise ConfigError(f"checkpoint does not match the network architecture: {e}") from e
    network.version = checkpoint.step
    return network


class Trainer:
    """Состояние оптимизации: сеть, Adam, генераторы выборки и шаг"""

    def __init__(self, config: TrainConfig, network: Optional[ZestNetwork] = None):
        self.config = config
        if network is None:
            # инициализация весов не зависит от глобального RNG
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(config.seed)
                network = ZestNetwork(config)
        self.network = network.to(settings.device)
        self.optimizer = torch.optim.Adam(
            self.network.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
        )
        self.generator = make_generator(config.seed)
        # сдвиги отсчётов на устройстве лучей
        self.jitter_generator = make_generator(config.seed + 1, settings.device)
        self.sampler_state = self.generator.get_state()
        self.cache = VolumeCache()
        self.step = 0

    def sample_batch(self, scenes: Sequence[SceneBundle]) -> RayBatch:
        """Сцена равномерно, кадр равномерно, ray_batch пикселей с повторами"""
        g = self.generator
        scene_index = int(torch.randint(len(scenes), (1,), generator=g))
        scene = scenes[scene_index]
        time_index = int(torch.randint(scene.n_frames, (1,), generator=g))
        rows = torch.randint(scene.height, (self.config.ray_batch,), generator=g)
        cols = torch.randint(scene.width, (self.config.ray_batch,), generator=g)
        return RayBatch(
            scene_index=scene_index,
            scene_id=scene.scene_id,
            time_index=time_index,
            pixels=torch.stack([rows, cols], dim=-1),
            rng_state=g.get_state(),
        )

    def train_step(self, scene: SceneBundle, batch: RayBatch) -> LossReport:
        """Один шаг Adam по всем наборам параметров"""
        self.network.train()
        t = batch.time_index
        ctx = build_context(self.network, scene, t, self.config, cache=self.cache)
        cam = scene.cameras[t]
        rays = generate_rays(cam, batch.pixels.to(cam.dtype), ctx.time)
        result = render_rays(rays, ctx, jitter=True, generator=self.jitter_generator, with_aux=True)
        rows, cols = batch.pixels[:, 0], batch.pixels[:, 1]
        target = scene.frames[t][rows, cols].to(result.color_blend.dtype)
        terms = collect_terms(result, scene, t, batch.pixels, target)
        report = total_loss(terms, self.config.loss_weights, self.step)
        report.check_finite()

        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        self.network.bump_version()
        self.cache.drop_stale(self.network.version)
        self.sampler_state = batch.rng_state
        self.step += 1
        return report

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            step=self.step,
            seed=self.config.seed,
            config=self.config,
            network_state={k: v.detach().clone() for k, v in self.network.state_dict().items()},
            optimizer_state=self.optimizer.state_dict(),
            sampler_state=self.sampler_state.clone(),
            jitter_state=self.jitter_generator.get_state(),
        )

    def restore(self, checkpoint: Checkpoint) -> None:
        """Полное продолжение: веса, Adam, генераторы, шаг"""
        self.load_weights(checkpoint)
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        if checkpoint.sampler_state is not None:
            self.generator.set_state(checkpoint.sampler_state)
            self.sampler_state = checkpoint.sampler_state.clone()
        if checkpoint.jitter_state is not None:
            self.jitter_generator.set_state(checkpoint.jitter_state)
        self.step = checkpoint.step
        logger.info(f"🔄 Resumed from step {self.step}")

    def load_weights(self, checkpoint: Checkpoint) -> None:
        try:
            self.network.load_state_dict(checkpoint.network_state)
        except RuntimeError as e:
            raise ConfigError(f"checkpoint does not match the network architecture: {e}") from e
        self.network.version = checkpoint.step
        self.cache.clear()


StepCallback = Callable[[int, LossReport, RayBatch], None]


def fit(
    scenes: Sequence[SceneBundle],
    config: TrainConfig,
    *,
    checkpoint_dir: Optional[str] = None,
    resume: Optional[Checkpoint] = None,
    init: Optional[Checkpoint] = None,
    ledger: Optional[RunLedger] = None,
    run_id: Optional[int] = None,
    run_name: str = "train",
    fold: Optional[str] = None,
    on_step: Optional[StepCallback] = None,
) -> Checkpoint:
    """
    Сцено-агностичное обучение по списку сцен

    resume продолжает шаги и генераторы, init берёт только веса.
    """
    if not scenes:
        raise DataError("no scenes to train on")
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate scene ids: {ids}")
    scenes = [bundle_on_device(s) for s in scenes]

    trainer = Trainer(config)
    if resume is not None:
        trainer.restore(resume)
    elif init is not None:
        trainer.load_weights(init)
    if ledger is not None and run_id is None:
        run_id = ledger.start_run(run_name, fold, config_hash(config))

    remaining = max(0, config.total_steps - trainer.step)
    logger.info(
        f"🔄 Training on {len(scenes)} scene(s) {ids}: steps {trainer.step}..{config.total_steps}"
    )
    out_dir = Path(checkpoint_dir) if checkpoint_dir else None

    with RayBatchPrefetcher(
        lambda _: trainer.sample_batch(scenes), count=remaining, depth=config.prefetch_batches
    ) as prefetcher:
        for batch in prefetcher:
            report = trainer.train_step(scenes[batch.scene_index], batch)
            if ledger is not None:
                ledger.record_step(
                    run_id, report.step, batch.scene_id, batch.time_index, float(report.total.detach())
                )
            if on_step is not None:
                on_step(report.step, report, batch)
            if trainer.step % config.log_every == 0 or trainer.step == config.total_steps:
                logger.info(f"Step {trainer.step}/{config.total_steps} [{batch.scene_id}] {report.summary()}")
            if out_dir is not None and trainer.step % config.checkpoint_every == 0:
                trainer.checkpoint().save(out_dir / f"step_{trainer.step:07d}.zip")

    checkpoint = trainer.checkpoint()
    if out_dir is not None:
        checkpoint.save(out_dir / "last.zip")
    logger.info(f"✅ Training finished at step {trainer.step}")
    return checkpoint


def finetune(
    checkpoint: Checkpoint,
    scene: SceneBundle,
    config: Optional[TrainConfig] = None,
    steps: Optional[int] = None,
    **fit_kwargs,
) -> Checkpoint:
    """Дообучение на одной сцене с весов чекпоинта; 0 шагов: чекпоинт без изменений"""
    config = config or checkpoint.config
    steps = config.finetune_steps if steps is None else steps
    if steps <= 0:
        logger.info("Fine-tuning skipped (0 steps)")
        return checkpoint
    tuned = config.model_copy(update={"total_steps": steps}, deep=True)
    logger.info(f"🔄 Fine-tuning on {scene.scene_id} for {steps} steps")
    return fit([scene], tuned, init=checkpoint, run_name=f"finetune-{scene.scene_id}", **fit_kwargs)


def eval_frame_indices(n_frames: int, count: int) -> List[int]:
    """count кадров, равномерно по последовательности (с краями)"""
    if count >= n_frames:
        return list(range(n_frames))
    if count == 1:
        return [n_frames // 2]
    return sorted({round(i * (n_frames - 1) / (count - 1)) for i in range(count)})


def render_frames(
    network: ZestNetwork,
    scene: SceneBundle,
    config: TrainConfig,
    frames: Sequence[int],
    mode: RenderMode = RenderMode.BLEND,
    view: Optional[int] = None,
    cache: Optional[VolumeCache] = None,
) -> Dict[int, Dict[str, torch.Tensor]]:
    """
    Рендер кадров t ∈ frames камерой view (по умолчанию: камерой кадра t)

    Целевой кадр не участвует в собственном кондиционировании.
    """
    network.eval()
    if cache is None:
        cache = VolumeCache()
    scene = bundle_on_device(scene)
    renders: Dict[int, Dict[str, torch.Tensor]] = {}
    with torch.no_grad():
        for t in frames:
            ctx = build_context(network, scene, t, config, cache=cache, mode=mode)
            cam = scene.cameras[t if view is None else view]
            renders[t] = render_image(cam, ctx)
    return renders


def evaluate_scene(
    network: ZestNetwork,
    scene: SceneBundle,
    config: TrainConfig,
    frames: Optional[Sequence[int]] = None,
    mode: RenderMode = RenderMode.BLEND,
    literal: bool = False,
    lpips: Optional[LpipsHook] = None,
) -> MetricReport:
    frames = list(frames) if frames is not None else eval_frame_indices(scene.n_frames, config.eval_frames)
    renders = render_frames(network, scene, config, frames, mode)
    return evaluate_sequence(
        [renders[t]["color"] for t in frames],
        [scene.frames[t] for t in frames],
        names=[f"{scene.scene_id}:{t:05d}" for t in frames],
        literal=literal,
        lpips=lpips,
    )


def cross_validate(
    scenes: Sequence[SceneBundle],
    config: TrainConfig,
    ledger: Optional[RunLedger] = None,
    literal: bool = False,
    lpips: Optional[LpipsHook] = None,
    checkpoint_dir: Optional[str] = None,
) -> List[CrossValRow]:
    """
    Leave-one-out: фолд на каждую сцену, обучение без неё, оценка на ней

    Журнал запусков проверяет, что отложенная сцена не попала в обучение фолда.
    """
    if len(scenes) < 2:
        raise DataError(f"cross-validation needs at least 2 scenes, got {len(scenes)}")
    ledger = ledger or RunLedger()
    rows: List[CrossValRow] = []
    for held_out in scenes:
        train_scenes = [s for s in scenes if s.scene_id != held_out.scene_id]
        run_id = ledger.start_run(f"crossval-{held_out.scene_id}", held_out.scene_id, config_hash(config))
        fold_dir = str(Path(checkpoint_dir) / held_out.scene_id) if checkpoint_dir else None
        checkpoint = fit(train_scenes, config, ledger=ledger, run_id=run_id, checkpoint_dir=fold_dir)

        used = ledger.scene_ids(run_id)
        if held_out.scene_id in used:
            raise LeakageError(f"fold '{held_out.scene_id}' trained on its own evaluation scene")

        network = network_from_checkpoint(checkpoint, config)
        agnostic = evaluate_scene(network, held_out, config, literal=literal, lpips=lpips)
        row = CrossValRow(
            scene_id=held_out.scene_id,
            trained_on=sorted(used),
            psnr=agnostic.psnr,
            ssim=agnostic.ssim,
            lpips=agnostic.lpips,
        )
        if config.finetune_steps > 0:
            tuned = finetune(checkpoint, held_out, config)
            specific = evaluate_scene(
                network_from_checkpoint(tuned, config), held_out, config, literal=literal, lpips=lpips
            )
            row.finetuned_psnr = specific.psnr
            row.finetuned_ssim = specific.ssim
            row.finetuned_lpips = specific.lpips
        logger.info(f"✅ Fold {held_out.scene_id}: PSNR {row.psnr:.2f} SSIM {row.ssim:.4f}")
        rows.append(row)
    return rows


def gradient_audit(network: ZestNetwork, scene: SceneBundle, config: TrainConfig, batch: RayBatch) -> Dict[str, float]:
    """Норма градиента каждого набора параметров от одного L_rec"""
    network.train()
    network.zero_grad(set_to_none=True)
    ctx = build_context(network, scene, batch.time_index, config)
    cam = scene.cameras[batch.time_index]
    rays = generate_rays(cam, batch.pixels.to(cam.dtype), ctx.time)
    result = render_rays(rays, ctx)
    rows, cols = batch.pixels[:, 0], batch.pixels[:, 1]
    target = scene.frames[batch.time_index][rows, cols].to(result.color_blend.dtype)
    l_rec(result.color_blend, target).backward()
    norms: Dict[str, float] = {}
    for name, module in network.parameter_sets().items():
        total = 0.0
        for p in module.parameters():
            if p.grad is not None:
                total += float(p.grad.detach().pow(2).sum())
        norms[name] = total**0.5
    network.zero_grad(set_to_none=True)
    return norms


def bundle_on_device(scene: SceneBundle, device: Optional[str] = None) -> SceneBundle:
    """Копия сцены на устройстве settings.device"""
    target = torch.device(device or settings.device)
    if scene.frames.device == target:
        return scene

    def _move(tensor: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        return None if tensor is None else tensor.to(target)

    return dataclasses.replace(
        scene,
        frames=scene.frames.to(target),
        cameras=[cam.to(device=target) for cam in scene.cameras],
        flow_fwd=_move(scene.flow_fwd),
        flow_bwd=_move(scene.flow_bwd),
        depth=_move(scene.depth),
        masks=_move(scene.masks),
    )


