"""Тесты функций потерь и их взвешенной суммы"""

import math

import pytest
import torch

from zest.camera_geometry import project
from zest.errors import LossInputError, NumericalError
from zest.losses import (
    TERM_NAMES,
    distance_weight,
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
    scale_shift_align,
    term_weights,
    total_loss,
)
from zest.models import LossWeights


def _vec(x: float, y: float, z: float, rows: int = 4) -> torch.Tensor:
    return torch.tensor([[x, y, z]], dtype=torch.float64).expand(rows, 3)


def test_l_rec_known_value():
    """Тест: ошибка (0.1, 0, 0) на каждом луче даёт 0.01"""
    target = torch.full((5, 3), 0.5, dtype=torch.float64)
    pred = target + _vec(0.1, 0.0, 0.0, 5)
    assert float(l_rec(pred, target)) == pytest.approx(0.01, abs=1e-12)
    assert float(l_rec(target, target)) == 0.0
    with pytest.raises(LossInputError):
        l_rec(pred, target[:4])


def test_l_pho_occlusion_gating():
    """Тест фотометрической потери: Ŵ = 0 гасит ошибку, Ŵ = 1 даёт MSE"""
    target = torch.zeros(4, 3, dtype=torch.float64)
    warped = {1: _vec(0.2, 0.0, 0.0), -1: _vec(0.0, 0.1, 0.0)}
    zero = {1: torch.zeros(4, dtype=torch.float64), -1: torch.zeros(4, dtype=torch.float64)}
    assert float(l_pho(warped, target, zero)) == 0.0
    ones = {k: torch.ones(4, dtype=torch.float64) for k in warped}
    assert float(l_pho(warped, target, ones)) == pytest.approx(0.04 + 0.01, abs=1e-12)
    with pytest.raises(LossInputError):
        l_pho(warped, target, {1: ones[1]})


def test_l_occ_reg_bounds():
    """Тест регуляризации окклюзии: w ≡ 1 → 0, w ≡ 0 → 1"""
    ones = torch.ones(3, 5, dtype=torch.float64)
    assert float(l_occ_reg([ones, ones])) == 0.0
    assert float(l_occ_reg([ones * 0, ones * 0])) == 1.0
    assert float(l_occ_reg([ones, ones * 0])) == 0.5


def test_l_blend_entropy():
    """Тест энтропии смешивания: b = 1/e даёт 1/e, крайние значения дают 0"""
    b = torch.full((10,), 1.0 / math.e, dtype=torch.float64)
    assert float(l_blend_entropy(b)) == pytest.approx(1.0 / math.e, abs=1e-12)
    assert float(l_blend_entropy(torch.zeros(10, dtype=torch.float64))) == pytest.approx(0.0, abs=1e-6)
    assert float(l_blend_entropy(torch.ones(10, dtype=torch.float64))) == 0.0


def test_l_blend_entropy_gradient_is_finite_at_zero():
    """Тест: градиент энтропии конечен при b = 0"""
    b = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    l_blend_entropy(b).backward()
    assert bool(torch.isfinite(b.grad).all())


def test_l_cycle():
    """Тест цикличности: точное обращение даёт 0, вес масштабирует ошибку"""
    g = torch.Generator().manual_seed(0)
    forward = torch.rand(4, 6, 3, generator=g, dtype=torch.float64)
    weight = torch.ones(4, 6, dtype=torch.float64)
    assert float(l_cycle({1: (forward, -forward, weight), -1: (-forward, forward, weight)})) == 0.0

    error = torch.zeros(4, 6, 3, dtype=torch.float64)
    error[..., 0] = 0.5
    assert float(l_cycle({1: (forward, -forward + error, weight)})) == pytest.approx(0.5)
    assert float(l_cycle({1: (forward, -forward + error, weight * 0)})) == 0.0
    with pytest.raises(LossInputError):
        l_cycle({})


def test_l_flow_min():
    """Тест минимальности потока: ‖(1, 0, 0)‖₁ = 1"""
    flow = _vec(1.0, 0.0, 0.0).reshape(2, 2, 3)
    assert float(l_flow_min([flow, flow])) == 1.0
    assert float(l_flow_min([flow * 0])) == 0.0


def test_l_flow_smooth_spatial():
    """Тест пространственной гладкости: постоянный поток даёт 0, скачок взвешен расстоянием"""
    points = torch.zeros(1, 3, 3, dtype=torch.float64)
    points[0, :, 2] = torch.tensor([1.0, 1.5, 2.0], dtype=torch.float64)
    constant = torch.ones(1, 3, 3, dtype=torch.float64)
    assert float(l_flow_smooth_spatial([constant, constant], points)) == 0.0

    jump = torch.zeros(1, 3, 3, dtype=torch.float64)
    jump[0, 2, 0] = 1.0
    expected = math.exp(-2.0 * 0.5) / 2.0
    assert float(l_flow_smooth_spatial([jump], points)) == pytest.approx(expected, abs=1e-12)
    assert float(distance_weight(points[0, 0], points[0, 0])) == 1.0


def test_l_flow_smooth_temporal():
    """Тест временной гладкости: (1,0,0) и (1,0,0) дают 4, противоположные дают 0"""
    fwd = _vec(1.0, 0.0, 0.0)
    assert float(l_flow_smooth_temporal(fwd, fwd)) == 4.0
    assert float(l_flow_smooth_temporal(fwd, -fwd)) == 0.0


def test_l_geo_zero_when_consistent(camera_pair):
    """Тест геометрической потери: согласованный псевдо-поток даёт 0"""
    ref, src = camera_pair
    g = torch.Generator().manual_seed(1)
    point = torch.rand(8, 3, generator=g, dtype=torch.float64) - 0.5
    point[:, 2] += 3.0
    pixels_xy, _ = project(ref, point)
    flows = {1: torch.rand(8, 3, generator=g, dtype=torch.float64) * 0.1, -1: torch.zeros(8, 3, dtype=torch.float64)}
    cameras = {1: src, -1: ref}
    pseudo = {k: project(cameras[k], point + flows[k])[0] - pixels_xy for k in flows}
    assert float(l_geo(point, flows, cameras, pseudo, pixels_xy)) == pytest.approx(0.0, abs=1e-9)

    shifted = {1: pseudo[1] + torch.tensor([1.0, 0.0], dtype=torch.float64), -1: pseudo[-1]}
    assert float(l_geo(point, flows, cameras, shifted, pixels_xy)) == pytest.approx(1.0, abs=1e-9)

    with pytest.raises(LossInputError):
        l_geo(point, flows, cameras, {1: pseudo[1]}, pixels_xy)


def test_scale_shift_alignment():
    """Тест выравнивания глубины: D̂ = 2D + 3 даёт нулевую потерю"""
    g = torch.Generator().manual_seed(2)
    pseudo = torch.rand(32, generator=g, dtype=torch.float64) + 1.0
    pred = 2.0 * pseudo + 3.0
    scale, shift = scale_shift_align(pred, pseudo)
    assert float(scale) == pytest.approx(2.0, abs=1e-9)
    assert float(shift) == pytest.approx(3.0, abs=1e-9)
    assert float(l_depth(pred, pseudo)) == pytest.approx(0.0, abs=1e-9)

    flat = torch.full((8,), 2.0, dtype=torch.float64)
    scale, shift = scale_shift_align(flat + 1.0, flat)
    assert float(scale) == 1.0 and float(shift) == pytest.approx(1.0)


def test_l_depth_invariant_to_pseudo_depth_scale_and_shift():
    """Тест: l_depth не меняется при D → s·D + o (s > 0) и равна 0 для D̂ = s·D + o"""
    g = torch.Generator().manual_seed(3)
    pseudo = torch.rand(64, generator=g, dtype=torch.float64) * 4.0 + 0.5
    pred = torch.rand(64, generator=g, dtype=torch.float64) * 3.0 + 1.0
    base = float(l_depth(pred, pseudo))
    assert base > 0.0
    for _ in range(10):
        s = float(torch.rand(1, generator=g, dtype=torch.float64)) * 20.0 + 0.05
        o = float(torch.randn(1, generator=g, dtype=torch.float64)) * 5.0
        assert float(l_depth(pred, s * pseudo + o)) == pytest.approx(base, rel=1e-9, abs=1e-12)
        assert float(l_depth(s * pseudo + o, pseudo)) == pytest.approx(0.0, abs=1e-9)


def test_loss_gradients_match_finite_differences(camera_pair):
    """Тест градиентов всех компонент потерь по их входам (float64)"""
    g = torch.Generator().manual_seed(4)

    def rand(*shape, low=0.1, high=0.9):
        return (torch.rand(*shape, generator=g, dtype=torch.float64) * (high - low) + low).requires_grad_(True)

    def check(fn, *inputs):
        assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-5)

    target = torch.rand(4, 3, generator=g, dtype=torch.float64)
    check(lambda pred: l_rec(pred, target), rand(4, 3))
    check(lambda a, b, wa, wb: l_pho({1: a, -1: b}, target, {1: wa, -1: wb}), rand(4, 3), rand(4, 3), rand(4), rand(4))
    check(lambda w1, w2: l_occ_reg([w1, w2]), rand(3, 5), rand(3, 5))
    check(l_blend_entropy, rand(12))
    check(lambda f, b, w: l_cycle({1: (f, b, w)}), rand(3, 4, 3), rand(3, 4, 3), rand(3, 4))
    check(lambda f1, f2: l_flow_min([f1, f2]), rand(3, 4, 3), rand(3, 4, 3))
    check(lambda f, p: l_flow_smooth_spatial([f], p), rand(2, 5, 3), rand(2, 5, 3, low=0.0, high=3.0))
    check(l_flow_smooth_temporal, rand(3, 4, 3), rand(3, 4, 3))

    ref, src = camera_pair
    point = (torch.rand(6, 3, generator=g, dtype=torch.float64) - 0.5).detach()
    point[:, 2] += 3.0
    pixels_xy, _ = project(ref, point)
    pseudo = {1: torch.randn(6, 2, generator=g, dtype=torch.float64) * 3.0}
    check(
        lambda x, f: l_geo(x, {1: f}, {1: src}, pseudo, pixels_xy),
        point.clone().requires_grad_(True),
        rand(6, 3, low=-0.1, high=0.1),
    )
    pseudo_depth = torch.rand(16, generator=g, dtype=torch.float64) + 1.0
    check(lambda d: l_depth(d, pseudo_depth), rand(16, low=1.0, high=4.0))


def test_term_weights_decay():
    """Тест затухания: geo/depth линейно уходят в 0 к decay_steps"""
    weights = LossWeights(decay_steps=10)
    start = term_weights(weights, 0)
    half = term_weights(weights, 5)
    done = term_weights(weights, 10)
    assert start["geo"] == pytest.approx(0.02) and start["depth"] == pytest.approx(0.04)
    assert half["geo"] == pytest.approx(0.01) and half["depth"] == pytest.approx(0.02)
    assert done["geo"] == 0.0 and done["depth"] == 0.0
    assert term_weights(weights, 25)["depth"] == 0.0
    assert done["rec"] == start["rec"] == 1.0
    assert set(done) == set(TERM_NAMES)


def test_total_loss_weighted_sum():
    """Тест взвешенной суммы и списка пропущенных компонент"""
    weights = LossWeights(decay_steps=10)
    terms = {
        "rec": torch.tensor(0.5, dtype=torch.float64),
        "occ": torch.tensor(2.0, dtype=torch.float64),
        "geo": torch.tensor(1.0, dtype=torch.float64),
    }
    report = total_loss(terms, weights, step=5)
    assert float(report.total) == pytest.approx(0.5 + 0.1 * 2.0 + 0.01 * 1.0)
    assert report.weights["geo"] == pytest.approx(0.01)
    assert "pho" in report.skipped and "rec" not in report.skipped
    assert report.values()["occ"] == 2.0
    assert report.summary().startswith("total=")
    report.check_finite()

    late = total_loss(terms, weights, step=10)
    assert float(late.total) == pytest.approx(0.5 + 0.2)


def test_total_loss_zero_weights():
    """Тест: нулевые веса дают нулевой итог"""
    terms = {name: torch.tensor(1.0) for name in TERM_NAMES}
    assert float(total_loss(terms, LossWeights.zeros(), step=0).total) == 0.0


def test_total_loss_errors():
    """Тест ошибок: неизвестная компонента, пустой набор, NaN"""
    weights = LossWeights()
    with pytest.raises(LossInputError):
        total_loss({"bogus": torch.tensor(1.0)}, weights, step=0)
    with pytest.raises(LossInputError):
        total_loss({}, weights, step=0)

    report = total_loss({"rec": torch.tensor(1.0), "pho": torch.tensor(float("nan"))}, weights, step=3)
    with pytest.raises(NumericalError) as excinfo:
        report.check_finite()
    assert excinfo.value.term == "pho"
    assert excinfo.value.report is report
