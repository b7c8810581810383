"""
Дифференцируемый ray marching: смешанный статический/динамический рендер,
рендер в смещённых потоком точках, веса окклюзии, ожидаемые глубина/точка/поток
"""

import enum
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Optional, Sequence, Tuple

import torch

from config.settings import settings
from zest.camera_geometry import Camera, Rays, all_pixels, generate_rays
from zest.encoding_volumes import EncodingVolume, View
from zest.errors import RenderInputError
from zest.network import ZestNetwork
from zest.radiance_fields import DynamicSample, StaticSample, gather_conditioning

logger = logging.getLogger(__name__)


class RenderMode(str, enum.Enum):
    BLEND = "blend"
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class RaySamples:
    """Отсчёты вдоль лучей: gammas (R, S) по возрастанию, points (R, S, 3), deltas (R, S)"""

    gammas: torch.Tensor
    points: torch.Tensor
    deltas: torch.Tensor
    jittered: bool


def sample_ray(
    rays: Rays,
    n: int,
    jitter: bool = False,
    generator: Optional[torch.Generator] = None,
) -> RaySamples:
    """
    n бинов равной длины на [near, far]: середины бинов или (jitter) равномерно внутри бина
    """
    if n < 2:
        raise RenderInputError(f"need at least 2 samples per ray, got {n}")
    dtype = rays.origins.dtype
    steps = torch.arange(n + 1, dtype=dtype, device=rays.origins.device) / n
    edges = rays.near[:, None] + (rays.far - rays.near)[:, None] * steps
    lower, upper = edges[:, :-1], edges[:, 1:]
    if jitter:
        u = torch.rand(lower.shape, generator=generator, dtype=dtype, device=lower.device)
    else:
        u = torch.full_like(lower, 0.5)
    gammas = lower + (upper - lower) * u
    deltas = torch.cat([gammas[:, 1:] - gammas[:, :-1], (upper - lower)[:, -1:]], dim=-1)
    points = rays.origins[:, None, :] + gammas[..., None] * rays.directions[:, None, :]
    return RaySamples(gammas=gammas, points=points, deltas=deltas, jittered=jitter)


def alpha(sigma: torch.Tensor, deltas: Optional[torch.Tensor] = None) -> torch.Tensor:
    """1 − exp(−σ) (σ уже включает шаг) или 1 − exp(−σδ)"""
    optical = sigma if deltas is None else sigma * deltas
    return 1.0 - torch.exp(-optical)


def _exclusive_transmittance(optical: torch.Tensor) -> torch.Tensor:
    accumulated = torch.cumsum(optical, dim=-1)
    shifted = torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated[..., :-1]], dim=-1)
    return torch.exp(-shifted)


def _check_same_shape(**tensors: torch.Tensor) -> None:
    shapes = {name: tuple(t.shape) for name, t in tensors.items()}
    if len(set(shapes.values())) > 1:
        raise RenderInputError(f"per-sample inputs differ in shape: {shapes}")


def blended_transmittance(
    sigma_s: torch.Tensor,
    sigma_d: torch.Tensor,
    blend: torch.Tensor,
    deltas: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """τ^b_γ = exp(−Σ_{j<γ} (σ_j(1−b_j) + σ_{t,j}·b_j)), τ^b_1 = 1"""
    _check_same_shape(sigma_s=sigma_s, sigma_d=sigma_d, blend=blend)
    mixed = sigma_s * (1.0 - blend) + sigma_d * blend
    if deltas is not None:
        mixed = mixed * deltas
    return _exclusive_transmittance(mixed)


def dynamic_transmittance(sigma: torch.Tensor, deltas: Optional[torch.Tensor] = None) -> torch.Tensor:
    return _exclusive_transmittance(sigma if deltas is None else sigma * deltas)


def dynamic_weights(sigma: torch.Tensor, deltas: Optional[torch.Tensor] = None) -> torch.Tensor:
    """τ_γ(1 − exp(−σ_γ)) только по динамической плотности"""
    return dynamic_transmittance(sigma, deltas) * alpha(sigma, deltas)


@dataclass
class BlendedComposite:
    color_blend: torch.Tensor
    color_static: torch.Tensor
    color_dynamic: torch.Tensor
    alpha_acc: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor


def render_blended(
    static: StaticSample,
    dynamic: DynamicSample,
    blend: Optional[torch.Tensor] = None,
    deltas: Optional[torch.Tensor] = None,
) -> BlendedComposite:
    """
    Смешанный рендер вдоль последней оси отсчётов

    Смешивание поотсчётное внутри суммы:
    Ĉ^b = Σ τ^b[(1−b)(1−e^{−σ})c + b(1−e^{−σ_t})c_t]. При постоянном b
    это ровно (1−b)Ĉ_sta + bĈ_dy. blend переопределяет static.blend.
    """
    b = static.blend if blend is None else blend
    _check_same_shape(sigma_s=static.sigma, sigma_d=dynamic.sigma, blend=b)
    tau = blended_transmittance(static.sigma, dynamic.sigma, b, deltas)
    alpha_s = alpha(static.sigma, deltas)
    alpha_d = alpha(dynamic.sigma, deltas)
    static_weights = tau * alpha_s
    dynamic_weights_ = tau * alpha_d
    color_static = (static_weights[..., None] * static.color).sum(dim=-2)
    color_dynamic = (dynamic_weights_[..., None] * dynamic.color).sum(dim=-2)
    mixed_static = (1.0 - b) * static_weights
    mixed_dynamic = b * dynamic_weights_
    color_blend = (
        mixed_static[..., None] * static.color + mixed_dynamic[..., None] * dynamic.color
    ).sum(dim=-2)
    weights = mixed_static + mixed_dynamic
    return BlendedComposite(
        color_blend=color_blend,
        color_static=color_static,
        color_dynamic=color_dynamic,
        alpha_acc=weights.sum(dim=-1),
        weights=weights,
        transmittance=tau,
    )


def render_dynamic_at(shifted: DynamicSample, deltas: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Ĉ_dy(r + f_{t→k}) с собственной прозрачностью τ_k = exp(−Σ σ_k)"""
    weights = dynamic_weights(shifted.sigma, deltas)
    return (weights[..., None] * shifted.color).sum(dim=-2)


def render_occlusion_weight(
    samples: DynamicSample,
    confidence: torch.Tensor,
    deltas: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Ŵ = Σ τ_k(1 − e^{−σ_k})·w; в [0, 1] при w ∈ [0, 1]"""
    _check_same_shape(sigma=samples.sigma, confidence=confidence)
    return (dynamic_weights(samples.sigma, deltas) * confidence).sum(dim=-1)


def render_expected_geometry(
    samples: DynamicSample,
    points: torch.Tensor,
    gammas: torch.Tensor,
    deltas: Optional[torch.Tensor] = None,
    offsets: Sequence[int] = (1, -1),
    far: Optional[torch.Tensor] = None,
    far_point: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, Dict[int, torch.Tensor], torch.Tensor]:
    """
    Ожидаемые точка X̂, 3D поток F̂_{t→k} и глубина D̂ с динамической прозрачностью

    Если заданы far (R,) и far_point (R, 3), непоглощённая доля луча
    завершается в точке o + far·d: D̂ остаётся в [near, far], а X̂ = o + D̂·d.
    Дальняя точка статична, её поток нулевой, поэтому F̂ остатка не получает:
    F̂ = Σ w·f при любом far.
    """
    weights = dynamic_weights(samples.sigma, deltas)
    point = (weights[..., None] * points).sum(dim=-2)
    flows = {
        offset: (weights[..., None] * samples.flow_to(offset)).sum(dim=-2) for offset in offsets
    }
    depth = (weights * gammas).sum(dim=-1)
    if far is not None:
        residual = 1.0 - weights.sum(dim=-1)
        depth = depth + residual * far
        if far_point is not None:
            point = point + residual[..., None] * far_point
    return point, flows, depth


@dataclass
class RenderContext:
    """
    Всё, что нужно для рендера лучей сцены в момент time_index

    geometry/motion = None означает абляцию соответствующего объёма (нули).
    Смещённые запросы в момент k используют M и цвета соседей момента t.
    """

    network: ZestNetwork
    geometry: Optional[EncodingVolume]
    motion: Optional[EncodingVolume]
    keyframes: Sequence[Optional[View]]
    neighbors: Sequence[Optional[View]]
    time_index: int
    n_frames: int
    samples_per_ray: int = 128
    mode: RenderMode = RenderMode.BLEND
    spacing_aware_alpha: bool = False
    pho_radius: int = 1

    def normalized_time(self, index: int) -> float:
        if self.n_frames <= 1:
            return 0.0
        return index / (self.n_frames - 1)

    def has_frame(self, index: int) -> bool:
        return 0 <= index < self.n_frames

    @property
    def time(self) -> float:
        return self.normalized_time(self.time_index)


@dataclass
class RenderResult:
    """
    Результат по лучам

    color_* (R, 3), depth/alpha_acc (R,), point (R, 3). Поля вспомогательных
    словарей заполняются только для обучения (with_aux) и индексируются
    смещением соседа k − t.
    """

    color_blend: torch.Tensor
    color_static: torch.Tensor
    color_dynamic: torch.Tensor
    depth: torch.Tensor
    point: torch.Tensor
    alpha_acc: torch.Tensor
    flow: Dict[int, torch.Tensor] = field(default_factory=dict)
    static: Optional[StaticSample] = None
    dynamic: Optional[DynamicSample] = None
    sample_points: Optional[torch.Tensor] = None
    warped: Dict[int, torch.Tensor] = field(default_factory=dict)
    occlusion: Dict[int, torch.Tensor] = field(default_factory=dict)
    # смещение → (f_{t→k}(x_t), f_{k→t}(x_{t→k}), w_{t→k}), все (R, S, ...)
    cycle: Dict[int, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = field(default_factory=dict)


def _reshape_static(sample: StaticSample, shape: Tuple[int, int]) -> StaticSample:
    return StaticSample(
        sigma=sample.sigma.reshape(shape),
        color=sample.color.reshape(*shape, 3),
        blend=sample.blend.reshape(shape),
    )


def _reshape_dynamic(sample: DynamicSample, shape: Tuple[int, int]) -> DynamicSample:
    return DynamicSample(
        sigma=sample.sigma.reshape(shape),
        color=sample.color.reshape(*shape, 3),
        flow_fwd=sample.flow_fwd.reshape(*shape, 3),
        flow_bwd=sample.flow_bwd.reshape(*shape, 3),
        occ_fwd=sample.occ_fwd.reshape(shape),
        occ_bwd=sample.occ_bwd.reshape(shape),
    )


def _eval_dynamic(ctx: RenderContext, points: torch.Tensor, dirs: torch.Tensor, index: int) -> DynamicSample:
    conditioning, _ = gather_conditioning(points, ctx.neighbors, ctx.motion, ctx.network.volume_channels)
    return ctx.network.dynamic_field(points, dirs, ctx.normalized_time(index), conditioning)


def _displace(
    ctx: RenderContext,
    points: torch.Tensor,
    dirs: torch.Tensor,
    sample: DynamicSample,
    offset: int,
) -> Tuple[torch.Tensor, DynamicSample, torch.Tensor]:
    """
    Переносит точки потоком к t+offset (для |offset| = 2: цепочкой через t±1)

    Возвращает также уверенность w_{t→k}, предсказанную в исходных точках;
    по цепочке уверенности звеньев перемножаются.
    """
    step = 1 if offset > 0 else -1
    index = ctx.time_index
    confidence = torch.ones_like(sample.occ_fwd)
    for _ in range(abs(offset)):
        confidence = confidence * sample.occ_to(step)
        points = points + sample.flow_to(step)
        index += step
        sample = _eval_dynamic(ctx, points, dirs, index)
    return points, sample, confidence


def render_rays(
    rays: Rays,
    ctx: RenderContext,
    jitter: bool = False,
    generator: Optional[torch.Generator] = None,
    with_aux: bool = False,
) -> RenderResult:
    """
    Полный конвейер для пачки лучей:
    sample_ray → gather_conditioning → поля → все композиции
    """
    network = ctx.network
    dtype = network.dtype
    samples = sample_ray(rays, ctx.samples_per_ray, jitter=jitter, generator=generator)
    n_rays, n_samples = samples.gammas.shape
    shape = (n_rays, n_samples)
    gammas = samples.gammas.to(dtype)
    deltas = samples.deltas.to(dtype) if ctx.spacing_aware_alpha else None
    points = samples.points.to(dtype).reshape(-1, 3)
    dirs = rays.directions.to(dtype)[:, None, :].expand(n_rays, n_samples, 3).reshape(-1, 3)

    static_cond, _ = gather_conditioning(points, ctx.keyframes, ctx.geometry, network.volume_channels)
    static_flat = network.static_field(points, dirs, static_cond)
    dynamic_flat = _eval_dynamic(ctx, points, dirs, ctx.time_index)
    static = _reshape_static(static_flat, shape)
    dynamic = _reshape_dynamic(dynamic_flat, shape)

    if ctx.mode is RenderMode.STATIC:
        blend = torch.zeros_like(static.blend)
    elif ctx.mode is RenderMode.DYNAMIC:
        blend = torch.ones_like(static.blend)
    else:
        blend = static.blend
    composite = render_blended(static, dynamic, blend, deltas)

    offsets = [o for o in (1, -1) if ctx.has_frame(ctx.time_index + o)]
    point, flows, depth = render_expected_geometry(
        dynamic,
        samples.points.to(dtype),
        gammas,
        deltas,
        offsets=offsets,
        far=rays.far.to(dtype),
        far_point=(rays.origins + rays.far[:, None] * rays.directions).to(dtype),
    )
    result = RenderResult(
        color_blend=composite.color_blend,
        color_static=composite.color_static,
        color_dynamic=composite.color_dynamic,
        depth=depth,
        point=point,
        alpha_acc=composite.alpha_acc,
        flow=flows,
    )
    if not with_aux:
        return result

    result.static = StaticSample(sigma=static.sigma, color=static.color, blend=blend)
    result.dynamic = dynamic
    result.sample_points = samples.points.to(dtype)
    pho_offsets = [
        o
        for r in range(1, ctx.pho_radius + 1)
        for o in (r, -r)
        if ctx.has_frame(ctx.time_index + o)
    ]
    for offset in pho_offsets:
        _, shifted_flat, confidence = _displace(ctx, points, dirs, dynamic_flat, offset)
        shifted = _reshape_dynamic(shifted_flat, shape)
        result.warped[offset] = render_dynamic_at(shifted, deltas)
        # τ и σ смещённого луча, уверенность w_{t→k} из точек момента t
        result.occlusion[offset] = render_occlusion_weight(shifted, confidence.reshape(shape), deltas)
        if abs(offset) == 1:
            result.cycle[offset] = (
                dynamic.flow_to(offset),
                shifted.flow_to(-offset),
                dynamic.occ_to(offset),
            )
    return result


def render_ray(ray: Rays, ctx: RenderContext) -> RenderResult:
    """Один луч (Rays длины 1) в режиме оценки"""
    return render_rays(ray[0:1], ctx)


def render_image(
    cam: Camera,
    ctx: RenderContext,
    chunk: Optional[int] = None,
    workers: Optional[int] = None,
) -> Dict[str, torch.Tensor]:
    """
    Рендер полного кадра камерой cam в момент ctx.time_index

    Лучи делятся на чанки по settings.render_chunk и рендерятся пулом
    из settings.worker_count потоков без градиентов.

    Returns:
        {"color": (H, W, 3), "static": ..., "dynamic": ..., "depth": (H, W), "alpha": (H, W)}
    """
    chunk = chunk or settings.render_chunk
    workers = workers or settings.worker_count
    pixels = all_pixels(cam.height, cam.width, dtype=cam.dtype, device=cam.device)
    rays = generate_rays(cam, pixels, ctx.time)
    bounds = [(start, min(start + chunk, len(rays))) for start in range(0, len(rays), chunk)]

    def _render(bound: Tuple[int, int]) -> RenderResult:
        with torch.no_grad():
            return render_rays(rays[bound[0]:bound[1]], ctx)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_render, bounds))
    else:
        parts = [_render(bound) for bound in bounds]

    height, width = cam.height, cam.width
    return {
        "color": torch.cat([p.color_blend for p in parts]).reshape(height, width, 3),
        "static": torch.cat([p.color_static for p in parts]).reshape(height, width, 3),
        "dynamic": torch.cat([p.color_dynamic for p in parts]).reshape(height, width, 3),
        "depth": torch.cat([p.depth for p in parts]).reshape(height, width),
        "alpha": torch.cat([p.alpha_acc for p in parts]).reshape(height, width),
    }


class VolumeCache:
    """
    Кэш объёмов кодирования

    Ключ включает версию параметров сети, поэтому после шага оптимизатора
    объёмы строятся заново; builds считает фактические построения.
    """

    def __init__(self):
        self._volumes: Dict[Hashable, EncodingVolume] = {}
        self._lock = threading.Lock()
        self.builds = 0

    def get(self, key: Hashable, builder: Callable[[], EncodingVolume]) -> EncodingVolume:
        with self._lock:
            volume = self._volumes.get(key)
            if volume is not None:
                return volume
        volume = builder()
        with self._lock:
            self._volumes[key] = volume
            self.builds += 1
        return volume

    def drop_stale(self, version: int) -> None:
        """Убирает объёмы других версий параметров (версия: последний элемент ключа)"""
        with self._lock:
            stale = [k for k in self._volumes if isinstance(k, tuple) and k[-1] != version]
            for key in stale:
                del self._volumes[key]
        if stale:
            logger.debug(f"Dropped {len(stale)} stale volumes")

    def clear(self) -> None:
        with self._lock:
            self._volumes.clear()

    def __len__(self) -> int:
        return len(self._volumes)
