"""Функции потерь обучения и их взвешенная сумма"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch

from zest.camera_geometry import Camera, project
from zest.errors import LossInputError, NumericalError
from zest.models import LossWeights


TERM_NAMES = (
    "rec", "pho", "occ", "blend", "cyc", "flow_min", "flow_sp", "flow_temp", "geo", "depth",
)
# Слабая супервизия, затухающая к нулю
DECAYED_TERMS = ("geo", "depth")
BLEND_EPS = 1e-7


def _l1(v: torch.Tensor) -> torch.Tensor:
    return v.abs().sum(dim=-1)


def _sq(v: torch.Tensor) -> torch.Tensor:
    return (v * v).sum(dim=-1)


def _check_shapes(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise LossInputError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l_rec(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Среднее по лучам ‖Ĉ^b − C‖²"""
    _check_shapes("l_rec", pred, target)
    return _sq(pred - target).mean()


def l_pho(
    warped: Mapping[int, torch.Tensor],
    target: torch.Tensor,
    occlusion: Mapping[int, torch.Tensor],
) -> torch.Tensor:
    """Σ_k среднее Ŵ_{k→t}·‖Ĉ_dy(r + f_{t→k}) − C(r)‖²"""
    if set(warped) != set(occlusion):
        raise LossInputError(
            f"l_pho: neighbor sets differ: {sorted(warped)} vs {sorted(occlusion)}"
        )
    total = target.new_zeros(())
    for k in sorted(warped):
        _check_shapes("l_pho", warped[k], target)
        total = total + (occlusion[k] * _sq(warped[k] - target)).mean()
    return total


def l_occ_reg(weights: Sequence[torch.Tensor]) -> torch.Tensor:
    """Среднее |w − 1| по всем точкам и обоим направлениям"""
    flat = torch.cat([w.reshape(-1) for w in weights])
    return (flat - 1.0).abs().mean()


def l_blend_entropy(blend: torch.Tensor) -> torch.Tensor:
    """Среднее −b·log b, 0·log 0 = 0"""
    return (-blend * torch.log(blend.clamp(BLEND_EPS, 1.0))).mean()


def l_cycle(cycle: Mapping[int, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Σ_{k∈{t±1}} среднее w_{t→k}·‖f_{t→k}(x_t) + f_{k→t}(x_{t→k})‖₁"""
    total: Optional[torch.Tensor] = None
    for k in sorted(cycle):
        forward, backward, weight = cycle[k]
        _check_shapes("l_cycle", forward, backward)
        term = (weight * _l1(forward + backward)).mean()
        total = term if total is None else total + term
    if total is None:
        raise LossInputError("l_cycle: no neighbor pairs")
    return total


def l_flow_min(flows: Sequence[torch.Tensor]) -> torch.Tensor:
    """Среднее ‖f‖₁ по точкам и направлениям"""
    flat = torch.cat([f.reshape(-1, 3) for f in flows])
    return _l1(flat).mean()


def distance_weight(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """w^dist = exp(−2‖x − y‖)"""
    return torch.exp(-2.0 * torch.linalg.norm(x - y, dim=-1))


def l_flow_smooth_spatial(flows: Sequence[torch.Tensor], points: torch.Tensor) -> torch.Tensor:
    """
    Пространственная гладкость: соседи: смежные отсчёты одного луча

    flows: по направлению (R, S, 3); points: (R, S, 3).
    """
    weight = distance_weight(points[..., :-1, :], points[..., 1:, :])
    terms = []
    for flow in flows:
        _check_shapes("l_flow_smooth_spatial", flow, points)
        terms.append((weight * _l1(flow[..., :-1, :] - flow[..., 1:, :])).mean())
    return torch.stack(terms).mean()


def l_flow_smooth_temporal(flow_fwd: torch.Tensor, flow_bwd: torch.Tensor) -> torch.Tensor:
    """Среднее ‖f_{t→t+1} + f_{t→t−1}‖² (минимум кинетической энергии)"""
    _check_shapes("l_flow_smooth_temporal", flow_fwd, flow_bwd)
    return _sq(flow_fwd + flow_bwd).mean()


def l_geo(
    point: torch.Tensor,
    flows: Mapping[int, torch.Tensor],
    cameras: Mapping[int, Camera],
    pseudo_flow: Mapping[int, torch.Tensor],
    pixels_xy: torch.Tensor,
) -> torch.Tensor:
    """
    Σ_{k∈{t±1}} среднее ‖project(cam_k, X̂ + F̂_{t→k}) − (p_t + u_{t→k})‖₁

    pixels_xy: координаты центров пикселей лучей (x, y); точки за камерой k
    не участвуют.
    """
    total = point.new_zeros(())
    for k in sorted(flows):
        if k not in pseudo_flow:
            raise LossInputError(f"l_geo: missing pseudo-flow for neighbor offset {k:+d}")
        if k not in cameras:
            raise LossInputError(f"l_geo: missing camera for neighbor offset {k:+d}")
        xy, in_front = project(cameras[k].to(dtype=point.dtype), point + flows[k])
        target = pixels_xy.to(point.dtype) + pseudo_flow[k].to(point.dtype)
        error = _l1(xy - target) * in_front.to(point.dtype)
        total = total + error.mean()
    return total


def scale_shift_align(pred: torch.Tensor, pseudo: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Наименьшие квадраты для s, o: pred ≈ s·pseudo + o

    Вырожденный батч (постоянная pseudo): только сдвиг, s = 1.
    """
    pseudo_mean = pseudo.mean()
    pred_mean = pred.mean()
    centered = pseudo - pseudo_mean
    variance = (centered * centered).mean()
    if float(variance) <= 1e-12 * (1.0 + float(pseudo_mean) ** 2):
        scale = torch.ones_like(variance)
    else:
        scale = (centered * (pred - pred_mean)).mean() / variance
    return scale, pred_mean - scale * pseudo_mean


def l_depth(pred: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    """Среднее |D̂ − (s·D + o)| после выравнивания масштаба и сдвига"""
    _check_shapes("l_depth", pred, pseudo)
    scale, shift = scale_shift_align(pred, pseudo)
    return (pred - (scale * pseudo + shift)).abs().mean()


@dataclass
class LossReport:
    """Значения компонент, применённые веса и итог = Σ λᵢ(step)·termᵢ"""

    step: int
    terms: Dict[str, torch.Tensor]
    weights: Dict[str, float]
    total: torch.Tensor
    skipped: Tuple[str, ...] = field(default_factory=tuple)

    def values(self) -> Dict[str, float]:
        return {name: float(value.detach()) for name, value in self.terms.items()}

    def check_finite(self) -> None:
        """NumericalError с именем первой нечисловой компоненты"""
        for name, value in self.terms.items():
            if not math.isfinite(float(value.detach())):
                raise NumericalError(
                    f"non-finite loss term '{name}' at step {self.step}", term=name, report=self
                )
        if not math.isfinite(float(self.total.detach())):
            raise NumericalError(f"non-finite total loss at step {self.step}", term="total", report=self)

    def summary(self) -> str:
        parts = [f"{name}={value:.5g}" for name, value in self.values().items()]
        return f"total={float(self.total.detach()):.5g} " + " ".join(parts)


def term_weights(weights: LossWeights, step: int) -> Dict[str, float]:
    """λᵢ(step): geo/depth затухают линейно, остальные постоянны"""
    decay = weights.decay_factor(step)
    resolved = {name: float(getattr(weights, name)) for name in TERM_NAMES}
    for name in DECAYED_TERMS:
        resolved[name] *= decay
    return resolved


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights, step: int) -> LossReport:
    """
    Взвешенная сумма компонент

    Отсутствующие компоненты (нет псевдо-GT, нет соседей) пропускаются.
    """
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise LossInputError(f"unknown loss terms: {sorted(unknown)}")
    if not terms:
        raise LossInputError("no loss terms to combine")
    lambdas = term_weights(weights, step)
    present = {name: terms[name] for name in TERM_NAMES if name in terms}
    total: Optional[torch.Tensor] = None
    for name, value in present.items():
        contribution = lambdas[name] * value
        total = contribution if total is None else total + contribution
    skipped = tuple(name for name in TERM_NAMES if name not in terms)
    return LossReport(
        step=step,
        terms=present,
        weights={name: lambdas[name] for name in present},
        total=total,
        skipped=skipped,
    )
