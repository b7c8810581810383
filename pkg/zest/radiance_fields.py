"""Статическое и динамическое поля излучения, позиционное кодирование, кондиционирование"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from zest.camera_geometry import Camera, bilinear_sample, project
from zest.encoding_volumes import EncodingVolume, sample_volume


HIDDEN = 256
POSITION_BANDS = 10
DIRECTION_BANDS = 4
# LR2..LR6
RESIDUAL_LAYERS = 5

View = Tuple[torch.Tensor, Camera]


class PositionalEncoding(nn.Module):
    """
    γ(v) = [v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{B−1}πv), cos(2^{B−1}πv)]

    Размер выхода: in_dim + 2·B·in_dim (при include_input).
    """

    def __init__(self, num_bands: int, in_dim: int = 3, include_input: bool = True):
        super().__init__()
        self.num_bands = num_bands
        self.in_dim = in_dim
        self.include_input = include_input
        self.register_buffer(
            "frequencies", math.pi * 2.0 ** torch.arange(num_bands, dtype=torch.float64),
            persistent=False,
        )

    @property
    def out_dim(self) -> int:
        return self.in_dim * (2 * self.num_bands + int(self.include_input))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        scaled = v[..., None, :] * self.frequencies.to(v.dtype)[:, None]
        bands = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-2)
        encoded = bands.reshape(*v.shape[:-1], 2 * self.num_bands * self.in_dim)
        if not self.include_input:
            return encoded
        return torch.cat([v, encoded], dim=-1)


def positional_encode(v: torch.Tensor, enc: PositionalEncoding) -> torch.Tensor:
    return enc(v)


@dataclass
class StaticSample:
    sigma: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)
    blend: torch.Tensor  # (N,)


@dataclass
class DynamicSample:
    sigma: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)
    flow_fwd: torch.Tensor  # (N, 3), t → t+1
    flow_bwd: torch.Tensor  # (N, 3), t → t−1
    occ_fwd: torch.Tensor  # (N,)
    occ_bwd: torch.Tensor  # (N,)

    def flow_to(self, offset: int) -> torch.Tensor:
        """Поток к соседу t+offset (offset = ±1)"""
        return self.flow_fwd if offset > 0 else self.flow_bwd

    def occ_to(self, offset: int) -> torch.Tensor:
        return self.occ_fwd if offset > 0 else self.occ_bwd


class ConditionedTrunk(nn.Module):
    """LR0 (кондиционирование), LR1 (PE позиции), LR2..LR6 со входом LRᵢ + LR0"""

    def __init__(self, conditioning_dim: int):
        super().__init__()
        self.position_encoding = PositionalEncoding(POSITION_BANDS)
        self.lr0 = nn.Linear(conditioning_dim, HIDDEN)
        self.lr1 = nn.Linear(self.position_encoding.out_dim, HIDDEN)
        self.residual = nn.ModuleList(nn.Linear(HIDDEN, HIDDEN) for _ in range(RESIDUAL_LAYERS))

    def activations(
        self,
        points: torch.Tensor,
        conditioning: torch.Tensor,
        drop_conditioning: bool = False,
    ) -> List[torch.Tensor]:
        """Выходы LR1..LR6; drop_conditioning обнуляет LR0 (проверка проводки)"""
        cond = F.relu(self.lr0(conditioning))
        if drop_conditioning:
            cond = torch.zeros_like(cond)
        h = F.relu(self.lr1(self.position_encoding(points)))
        outputs = [h]
        for layer in self.residual:
            h = F.relu(layer(h + cond))
            outputs.append(h)
        return outputs

    def forward(self, points, conditioning, drop_conditioning: bool = False) -> torch.Tensor:
        return self.activations(points, conditioning, drop_conditioning)[-1]


class ViewBranch(nn.Module):
    """LR7 (PE направления + LR6) и голова цвета"""

    def __init__(self):
        super().__init__()
        self.direction_encoding = PositionalEncoding(DIRECTION_BANDS)
        self.lr7 = nn.Linear(self.direction_encoding.out_dim + HIDDEN, HIDDEN)
        self.color = nn.Linear(HIDDEN, 3)

    def forward(self, trunk: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.lr7(torch.cat([self.direction_encoding(view_dirs), trunk], dim=-1)))
        return torch.sigmoid(self.color(h))


class StaticField(nn.Module):
    """F_Θ: (σ, c, b); σ и b читают LR6 и не зависят от направления"""

    def __init__(self, view_slots: int, volume_channels: int = 8):
        super().__init__()
        self.view_slots = view_slots
        self.volume_channels = volume_channels
        self.conditioning_dim = volume_channels + 3 * view_slots
        self.trunk = ConditionedTrunk(self.conditioning_dim)
        self.sigma = nn.Linear(HIDDEN, 1)
        self.blend = nn.Linear(HIDDEN, 1)
        self.view = ViewBranch()

    def forward(
        self,
        points: torch.Tensor,
        view_dirs: torch.Tensor,
        conditioning: torch.Tensor,
        drop_conditioning: bool = False,
    ) -> StaticSample:
        h = self.trunk(points, conditioning, drop_conditioning)
        return StaticSample(
            sigma=F.softplus(self.sigma(h))[..., 0],
            color=self.view(h, view_dirs),
            blend=torch.sigmoid(self.blend(h))[..., 0],
        )


class DynamicField(nn.Module):
    """
    F_Φ: (σ_t, c_t, поток вперёд/назад, веса окклюзии)

    Нормированное время дописывается ко входу LR0. Поток: линейная голова,
    умноженная на max_flow.
    """

    def __init__(self, view_slots: int, volume_channels: int = 8, max_flow: float = 0.5):
        super().__init__()
        self.view_slots = view_slots
        self.volume_channels = volume_channels
        self.max_flow = max_flow
        self.conditioning_dim = volume_channels + 3 * view_slots
        self.trunk = ConditionedTrunk(self.conditioning_dim + 1)
        self.sigma = nn.Linear(HIDDEN, 1)
        self.flow = nn.Linear(HIDDEN, 6)
        self.occlusion = nn.Linear(HIDDEN, 2)
        self.view = ViewBranch()

    def trunk_input(self, conditioning: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
        times = torch.as_tensor(times, dtype=conditioning.dtype, device=conditioning.device)
        times = times.expand(conditioning.shape[:-1])
        return torch.cat([conditioning, times[..., None]], dim=-1)

    def forward(
        self,
        points: torch.Tensor,
        view_dirs: torch.Tensor,
        times: torch.Tensor,
        conditioning: torch.Tensor,
        drop_conditioning: bool = False,
    ) -> DynamicSample:
        h = self.trunk(points, self.trunk_input(conditioning, times), drop_conditioning)
        flow = self.flow(h) * self.max_flow
        occ = torch.sigmoid(self.occlusion(h))
        return DynamicSample(
            sigma=F.softplus(self.sigma(h))[..., 0],
            color=self.view(h, view_dirs),
            flow_fwd=flow[..., :3],
            flow_bwd=flow[..., 3:],
            occ_fwd=occ[..., 0],
            occ_bwd=occ[..., 1],
        )


def gather_conditioning(
    points: torch.Tensor,
    frames: Sequence[Optional[View]],
    vol: Optional[EncodingVolume],
    volume_channels: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Вектор кондиционирования для точек (N, 3)

    [sample_volume(vol, X), цвет кадра 1 в project(cam, X), …]; vol=None даёт
    нули (абляция), отсутствующий кадр: нулевые цвета.

    Returns:
        (conditioning (N, F_vol + 3·len(frames)), out_of_frustum (N, len(frames)))
    """
    n = points.shape[0]
    if vol is None:
        parts = [points.new_zeros(n, volume_channels)]
    else:
        features, _ = sample_volume(vol, points)
        parts = [features.to(points.dtype)]
    flags = []
    for frame in frames:
        if frame is None:
            parts.append(points.new_zeros(n, 3))
            flags.append(torch.ones(n, dtype=torch.bool, device=points.device))
            continue
        image, cam = frame
        xy, in_front = project(cam.to(dtype=points.dtype), points)
        colors, inside = bilinear_sample(image.permute(2, 0, 1).to(points.dtype), xy)
        valid = inside & in_front
        parts.append(colors * valid[:, None].to(colors.dtype))
        flags.append(~valid)
    if flags:
        out_of_frustum = torch.stack(flags, dim=-1)
    else:
        out_of_frustum = torch.zeros(n, 0, dtype=torch.bool, device=points.device)
    return torch.cat(parts, dim=-1), out_of_frustum


def static_eval(
    points: torch.Tensor,
    view_dirs: torch.Tensor,
    conditioning: torch.Tensor,
    field: StaticField,
) -> StaticSample:
    return field(points, view_dirs, conditioning)


def dynamic_eval(
    points: torch.Tensor,
    view_dirs: torch.Tensor,
    times,
    conditioning: torch.Tensor,
    field: DynamicField,
) -> DynamicSample:
    return field(points, view_dirs, times, conditioning)
