"""
Объёмы кодирования: 2D признаки, развёртка по плоскостям, дисперсия и 3D U-Net

Геометрический объём G строится по ключевым кадрам, объём движения M: по
соседям целевого кадра. У каждого объёма свои экстрактор и регуляризатор.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from zest.camera_geometry import Camera, DepthPlaneSet, plane_homography, project, warp_image
from zest.errors import MotionVolumeError, VolumeError, VolumeShapeError

logger = logging.getLogger(__name__)

FEATURE_CHANNELS = 32
# Экстрактор уменьшает кадр в 4 раза
FEATURE_SCALE = 0.25
# Три уровня stride 2 в U-Net
VOLUME_MULTIPLE = 8

View = Tuple[torch.Tensor, Camera]


class VolumeKind(str, enum.Enum):
    GEOMETRY = "geometry"
    MOTION = "motion"


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_uniform_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm3d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class ConvBnReLU2D(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        dilation: int = 1,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel_size,
            stride=stride, padding=pad, dilation=dilation, bias=False,
        )
        self.bn = nn.BatchNorm2d(out_channels, eps=bn_eps, momentum=bn_momentum)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


class ConvBnReLU3D(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm3d(out_channels, eps=bn_eps, momentum=bn_momentum)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


class ConvTransposeBn3D(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 2,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        super().__init__()
        self.conv = nn.ConvTranspose3d(
            in_channels, out_channels, 3, stride=stride, padding=1,
            output_padding=stride - 1, bias=False,
        )
        self.bn = nn.BatchNorm3d(out_channels, eps=bn_eps, momentum=bn_momentum)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(self.conv(x))


class FeatureExtractor(nn.Module):
    """8 слоёв ConvBnReLU: 3→8→8→16→16→16→32→32→32, stride 2 на 3-м и 6-м"""

    def __init__(self, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        bn = dict(bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.layers = nn.Sequential(
            ConvBnReLU2D(3, 8, **bn),
            ConvBnReLU2D(8, 8, **bn),
            ConvBnReLU2D(8, 16, kernel_size=5, stride=2, dilation=2, **bn),
            ConvBnReLU2D(16, 16, **bn),
            ConvBnReLU2D(16, 16, **bn),
            ConvBnReLU2D(16, 32, kernel_size=5, stride=2, dilation=2, **bn),
            ConvBnReLU2D(32, 32, **bn),
            ConvBnReLU2D(32, FEATURE_CHANNELS, **bn),
        )
        self.apply(_init_weights)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, H, W) → (B, 32, H/4, W/4)
        return self.layers(images)


class CostRegularizer(nn.Module):
    """
    3D U-Net над объёмом стоимости

    Энкодер 8/16/32/64 каналов с тремя уровнями stride 2, декодер из
    транспонированных свёрток с аддитивными пропусками, затем CTB3 без
    изменения разрешения (8→32) и проекция 1×1×1 32→F_vol.
    """

    def __init__(
        self,
        view_slots: int,
        out_channels: int = 8,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        super().__init__()
        self.view_slots = view_slots
        self.in_channels = FEATURE_CHANNELS + 3 * view_slots
        self.out_channels = out_channels
        bn = dict(bn_momentum=bn_momentum, bn_eps=bn_eps)

        self.conv0 = ConvBnReLU3D(self.in_channels, 8, **bn)
        self.conv1 = ConvBnReLU3D(8, 16, stride=2, **bn)
        self.conv2 = ConvBnReLU3D(16, 16, **bn)
        self.conv3 = ConvBnReLU3D(16, 32, stride=2, **bn)
        self.conv4 = ConvBnReLU3D(32, 32, **bn)
        self.conv5 = ConvBnReLU3D(32, 64, stride=2, **bn)
        self.conv6 = ConvBnReLU3D(64, 64, **bn)

        self.up0 = ConvTransposeBn3D(64, 32, **bn)
        self.up1 = ConvTransposeBn3D(32, 16, **bn)
        self.up2 = ConvTransposeBn3D(16, 8, **bn)
        self.up3 = ConvTransposeBn3D(8, FEATURE_CHANNELS, stride=1, **bn)
        self.project = nn.Conv3d(FEATURE_CHANNELS, out_channels, 1)
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C_in, D, h, w)
        conv0 = self.conv0(x)
        conv2 = self.conv2(self.conv1(conv0))
        conv4 = self.conv4(self.conv3(conv2))
        x = self.conv6(self.conv5(conv4))
        x = conv4 + self.up0(x)
        x = conv2 + self.up1(x)
        x = conv0 + self.up2(x)
        return self.project(self.up3(x))


@dataclass
class SweepVolume:
    """Развёртка одной карты: values (D, C, h, w), valid (D, h, w)"""

    values: torch.Tensor
    valid: torch.Tensor


@dataclass
class CostVolume:
    """
    Дисперсия признаков по видам

    values (C_f, D, h, w) ≥ 0; colors (3·слотов, D, h, w): цвета видов
    на плоскостях (отсутствующие виды нулевые); empty: вокселы без
    единого валидного вида (их дисперсия 0).
    """

    values: torch.Tensor
    colors: torch.Tensor
    empty: torch.Tensor
    ref: Camera
    planes: DepthPlaneSet

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.values, self.colors], dim=0)


@dataclass
class EncodingVolume:
    """Регуляризованный объём (F_vol, D, h, w) во фрустуме ref (ref в масштабе объёма)"""

    values: torch.Tensor
    kind: VolumeKind
    ref: Camera
    planes: DepthPlaneSet

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])


def extract_features(image: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Кадр (H, W, 3) в [0,1] → признаки (32, H/4, W/4)"""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise VolumeShapeError(f"expected an H×W×3 image, got {tuple(image.shape)}")
    height, width = image.shape[:2]
    if height % 4 or width % 4:
        raise VolumeShapeError(f"image size {height}x{width} is not divisible by 4")
    return extractor(image.permute(2, 0, 1)[None])[0]


def downsample_colors(image: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """(H, W, 3) → (3, h, w) билинейным уменьшением"""
    return F.interpolate(
        image.permute(2, 0, 1)[None], size=size, mode="bilinear", align_corners=False
    )[0]


def build_sweep_volume(
    feature_map: torch.Tensor,
    src: Camera,
    ref: Camera,
    planes: DepthPlaneSet,
) -> SweepVolume:
    """
    Развёртка карты признаков источника по плоскостям ref

    Камеры передаются в масштабе карты (см. Camera.scaled); срез j равен
    warp_image(feature_map, plane_homography(src, ref, depths[j])).
    """
    channels, height, width = feature_map.shape
    if (height, width) != (src.height, src.width):
        raise VolumeShapeError(
            f"feature map {height}x{width} does not match camera {src.height}x{src.width}"
        )
    homographies = plane_homography(src, ref, planes.depths.to(ref.dtype))
    values, valid = warp_image(feature_map[None], homographies, out_size=(ref.height, ref.width))
    return SweepVolume(values=values, valid=valid)


def _sorted_sum(x: torch.Tensor) -> torch.Tensor:
    # сумма по видам в порядке возрастания: не зависит от порядка видов
    return torch.sort(x, dim=0).values.sum(dim=0)


def aggregate_variance(
    sweeps: Sequence[SweepVolume],
    ref: Camera,
    planes: DepthPlaneSet,
    colors: Optional[Sequence[Optional[SweepVolume]]] = None,
) -> CostVolume:
    """
    Популяционная дисперсия по видам, валидным в каждом вокселе

    colors: развёртки цветов по слотам (None: вид отсутствует, нули).
    """
    if len(sweeps) < 2:
        raise VolumeShapeError(f"variance needs at least 2 views, got {len(sweeps)}")
    shape = sweeps[0].values.shape
    for sweep in sweeps[1:]:
        if sweep.values.shape != shape:
            raise VolumeShapeError(
                f"sweep shape mismatch: {tuple(sweep.values.shape)} vs {tuple(shape)}"
            )
    depth, channels, height, width = shape

    values = torch.stack([s.values for s in sweeps])
    valid = torch.stack([s.valid for s in sweeps])[:, :, None]
    mask = valid.to(values.dtype)
    count = mask.sum(dim=0)
    safe_count = count.clamp(min=1.0)
    # центрирование на минимуме валидных видов: одинаковые виды дают ровно 0
    shift = torch.where(valid, values, torch.full_like(values, math.inf)).amin(dim=0)
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift)).detach()
    centered = (values - shift) * mask
    mean = _sorted_sum(centered) / safe_count
    variance = _sorted_sum(mask * (centered - mean) ** 2) / safe_count
    empty = count[:, 0] == 0
    variance = torch.where(empty[:, None], torch.zeros_like(variance), variance)
    if bool(empty.any()):
        logger.debug(f"{int(empty.sum())} voxels see no valid view")

    color_blocks: List[torch.Tensor] = []
    for sweep in colors or []:
        if sweep is None:
            color_blocks.append(values.new_zeros(depth, 3, height, width))
        else:
            color_blocks.append(sweep.values)
    if color_blocks:
        color_volume = torch.cat(color_blocks, dim=1).permute(1, 0, 2, 3)
    else:
        color_volume = values.new_zeros(0, depth, height, width)

    return CostVolume(
        values=variance.permute(1, 0, 2, 3),
        colors=color_volume,
        empty=empty,
        ref=ref,
        planes=planes,
    )


def regularize(cost: CostVolume, regularizer: CostRegularizer, kind: VolumeKind) -> EncodingVolume:
    """U-Net над объёмом стоимости → EncodingVolume с F_vol каналами"""
    stacked = cost.stacked()
    if stacked.shape[0] != regularizer.in_channels:
        raise VolumeShapeError(
            f"{kind.value} regularizer expects {regularizer.in_channels} channels, got {stacked.shape[0]}"
        )
    spatial = tuple(stacked.shape[1:])
    if any(size % VOLUME_MULTIPLE for size in spatial):
        raise VolumeShapeError(f"volume size {spatial} is not divisible by {VOLUME_MULTIPLE}")
    values = regularizer(stacked[None])[0]
    return EncodingVolume(values=values, kind=VolumeKind(kind), ref=cost.ref, planes=cost.planes)


def _regularize_padded(cost: CostVolume, regularizer: CostRegularizer, kind: VolumeKind) -> EncodingVolume:
    """regularize с replicate-дополнением до кратного 8 и обрезкой обратно"""
    depth, height, width = cost.values.shape[1:]
    pads = [(-size) % VOLUME_MULTIPLE for size in (depth, height, width)]
    if not any(pads):
        return regularize(cost, regularizer, kind)
    stacked = F.pad(
        cost.stacked()[None], (0, pads[2], 0, pads[1], 0, pads[0]), mode="replicate"
    )[0]
    channels = cost.values.shape[0]
    padded = CostVolume(
        values=stacked[:channels],
        colors=stacked[channels:],
        empty=cost.empty,
        ref=cost.ref,
        planes=cost.planes,
    )
    volume = regularize(padded, regularizer, kind)
    volume.values = volume.values[:, :depth, :height, :width]
    return volume


def build_cost_volume(
    views: Sequence[Optional[View]],
    ref: Camera,
    planes: DepthPlaneSet,
    extractor: FeatureExtractor,
) -> CostVolume:
    """extract → sweep → variance для списка слотов (None: отсутствующий вид)"""
    ref_scaled = ref.scaled(FEATURE_SCALE)
    sweeps: List[SweepVolume] = []
    colors: List[Optional[SweepVolume]] = []
    for view in views:
        if view is None:
            colors.append(None)
            continue
        image, cam = view
        cam_scaled = cam.scaled(FEATURE_SCALE)
        features = extract_features(image, extractor)
        sweeps.append(build_sweep_volume(features, cam_scaled, ref_scaled, planes))
        small = downsample_colors(image, (cam_scaled.height, cam_scaled.width))
        colors.append(build_sweep_volume(small, cam_scaled, ref_scaled, planes))
    return aggregate_variance(sweeps, ref_scaled, planes, colors=colors)


def _build_volume(
    views: Sequence[Optional[View]],
    ref: Camera,
    planes: DepthPlaneSet,
    extractor: FeatureExtractor,
    regularizer: CostRegularizer,
    kind: VolumeKind,
) -> EncodingVolume:
    if len(views) != regularizer.view_slots:
        raise VolumeShapeError(
            f"{kind.value} volume has {regularizer.view_slots} view slots, got {len(views)}"
        )
    cost = build_cost_volume(views, ref, planes, extractor)
    return _regularize_padded(cost, regularizer, kind)


def build_geometry_volume(
    keyframes: Sequence[Optional[View]],
    ref: Camera,
    planes: DepthPlaneSet,
    extractor: FeatureExtractor,
    regularizer: CostRegularizer,
) -> EncodingVolume:
    """Геометрический объём G по ключевым кадрам (веса w_Ω)"""
    if sum(view is not None for view in keyframes) < 2:
        raise VolumeError("geometry volume needs at least 2 keyframes")
    return _build_volume(keyframes, ref, planes, extractor, regularizer, VolumeKind.GEOMETRY)


def build_motion_volume(
    neighbors: Sequence[Optional[View]],
    ref: Camera,
    planes: DepthPlaneSet,
    extractor: FeatureExtractor,
    regularizer: CostRegularizer,
) -> EncodingVolume:
    """Объём движения M по соседям t±1, t±2 (веса w_Ξ)"""
    if sum(view is not None for view in neighbors) < 2:
        raise MotionVolumeError("motion volume needs at least 2 valid neighbors")
    return _build_volume(neighbors, ref, planes, extractor, regularizer, VolumeKind.MOTION)


def volume_coordinates(vol: EncodingVolume, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Точки (N, 3) → непрерывные индексы (plane, row, col) и флаг выхода за объём
    """
    ref = vol.ref.to(dtype=points.dtype)
    xy, in_front = project(ref, points)
    z = points @ ref.R[2] + ref.t[2]
    safe_z = torch.where(in_front, z, torch.full_like(z, ref.near))
    plane = vol.planes.index_of(safe_z)
    row = xy[..., 1] - 0.5
    col = xy[..., 0] - 0.5
    depth, height, width = vol.values.shape[1:]
    out_of_bounds = (
        ~in_front
        | (plane < 0) | (plane > depth - 1)
        | (row < 0) | (row > height - 1)
        | (col < 0) | (col > width - 1)
    )
    return torch.stack([plane, row, col], dim=-1), out_of_bounds


def sample_volume(vol: EncodingVolume, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Трилинейная выборка объёма в точках (N, 3)

    Returns:
        (features (N, F_vol), out_of_bounds (N,)); вне объёма: значение на краю.
    """
    coords, out_of_bounds = volume_coordinates(vol, points)
    depth, height, width = vol.values.shape[1:]
    sizes = coords.new_tensor([depth, height, width])
    normalized = 2.0 * coords / (sizes - 1).clamp(min=1) - 1.0
    # grid_sample ждёт порядок (x, y, z) = (col, row, plane)
    grid = normalized.flip(-1).to(vol.values.dtype).reshape(1, 1, 1, -1, 3)
    sampled = F.grid_sample(
        vol.values[None], grid, mode="bilinear", padding_mode="border", align_corners=True
    )
    return sampled[0, :, 0, 0].transpose(0, 1), out_of_bounds
