"""Тесты объёмов кодирования: признаки, развёртка, дисперсия, U-Net, выборка"""

import itertools
import math

import pytest
import torch

from zest.camera_geometry import Camera, DepthPlaneSet, DepthSpacing
from zest.encoding_volumes import (
    FEATURE_CHANNELS,
    FEATURE_SCALE,
    CostRegularizer,
    CostVolume,
    EncodingVolume,
    FeatureExtractor,
    SweepVolume,
    VolumeKind,
    aggregate_variance,
    build_cost_volume,
    build_geometry_volume,
    build_motion_volume,
    build_sweep_volume,
    downsample_colors,
    extract_features,
    regularize,
    sample_volume,
    volume_coordinates,
)
from zest.errors import MotionVolumeError, VolumeError, VolumeShapeError
from zest.models import TrainConfig
from zest.network import ZestNetwork


def _front_camera(width: int, height: int, focal: float = 10.0, tx: float = 0.0) -> Camera:
    return Camera.from_params(
        focal, focal, width / 2.0, height / 2.0, torch.eye(3), [tx, 0.0, 0.0], width, height, 1.0, 6.0
    )


def _random_sweeps(g: torch.Generator, views: int, shape=(4, 2, 4, 4), p_valid: float = 0.8):
    sweeps = []
    for _ in range(views):
        values = torch.rand(shape, generator=g, dtype=torch.float64)
        valid = torch.rand((shape[0], shape[2], shape[3]), generator=g) < p_valid
        sweeps.append(SweepVolume(values=values * valid[:, None], valid=valid))
    return sweeps


def _variance_oracle(sweeps):
    depth, channels, height, width = sweeps[0].values.shape
    out = torch.zeros(channels, depth, height, width, dtype=torch.float64)
    for d, c, y, x in itertools.product(range(depth), range(channels), range(height), range(width)):
        samples = [float(s.values[d, c, y, x]) for s in sweeps if bool(s.valid[d, y, x])]
        if not samples:
            continue
        mean = sum(samples) / len(samples)
        out[c, d, y, x] = sum((v - mean) ** 2 for v in samples) / len(samples)
    return out


def test_extract_features_shape_and_determinism():
    """Тест экстрактора: 64×48 → 32×16×12, одинаковые входы дают одинаковые признаки"""
    torch.manual_seed(0)
    extractor = FeatureExtractor().eval()
    image = torch.rand(64, 48, 3)
    with torch.no_grad():
        features = extract_features(image, extractor)
        again = extract_features(image.clone(), extractor)
    assert features.shape == (FEATURE_CHANNELS, 16, 12)
    assert torch.equal(features, again)


def test_extract_features_rejects_bad_input():
    """Тест ошибок экстрактора: размер не кратен 4, не три канала"""
    extractor = FeatureExtractor().eval()
    with pytest.raises(VolumeShapeError):
        extract_features(torch.rand(30, 48, 3), extractor)
    with pytest.raises(VolumeShapeError):
        extract_features(torch.rand(32, 48, 4), extractor)


def _assert_directional_derivatives(fn, x: torch.Tensor, g: torch.Generator, directions: int = 3, eps: float = 1e-6):
    """Градиент ⟨w, fn(x)⟩ вдоль случайных направлений против центральных разностей"""
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    weights = torch.randn(out.shape, generator=g, dtype=torch.float64)
    (out * weights).sum().backward()
    assert float(x.grad.abs().sum()) > 0
    for _ in range(directions):
        v = torch.randn(x.shape, generator=g, dtype=torch.float64)
        with torch.no_grad():
            plus = float((fn(x + eps * v) * weights).sum())
            minus = float((fn(x - eps * v) * weights).sum())
        numeric = (plus - minus) / (2 * eps)
        analytic = float((x.grad * v).sum())
        assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-6)


def test_extract_features_gradient_matches_finite_differences():
    """Тест градиента признаков по пикселям против конечных разностей (float64, BN в eval)"""
    torch.manual_seed(1)
    extractor = FeatureExtractor().double().eval()
    g = torch.Generator().manual_seed(1)
    image = torch.rand(8, 8, 3, generator=g, dtype=torch.float64)
    _assert_directional_derivatives(lambda x: extract_features(x, extractor), image, g)


def test_regularize_gradient_matches_finite_differences():
    """Тест градиента U-Net по объёму стоимости против конечных разностей"""
    torch.manual_seed(2)
    regularizer = CostRegularizer(view_slots=1, out_channels=4).double().eval()
    cam = _front_camera(8, 8)
    planes = DepthPlaneSet.between(1.0, 6.0, 8)
    g = torch.Generator().manual_seed(2)
    values = torch.rand(FEATURE_CHANNELS, 8, 8, 8, generator=g, dtype=torch.float64)
    colors = torch.rand(3, 8, 8, 8, generator=g, dtype=torch.float64)
    empty = torch.zeros(8, 8, 8, dtype=torch.bool)

    def _run(v: torch.Tensor) -> torch.Tensor:
        cost = CostVolume(values=v, colors=colors, empty=empty, ref=cam, planes=planes)
        return regularize(cost, regularizer, VolumeKind.GEOMETRY).values

    _assert_directional_derivatives(_run, values, g)


def test_sampled_geometry_volume_gradient_matches_finite_differences():
    """Тест градиента выборки G в точках по пикселям ключевых кадров"""
    torch.manual_seed(3)
    extractor = FeatureExtractor().double().eval()
    regularizer = CostRegularizer(view_slots=2, out_channels=4).double().eval()
    cams = [_front_camera(32, 32, focal=30.0, tx=0.1 * i) for i in range(2)]
    planes = DepthPlaneSet.between(1.0, 6.0, 8)
    g = torch.Generator().manual_seed(3)
    images = torch.rand(2, 32, 32, 3, generator=g, dtype=torch.float64)
    points = torch.rand(16, 3, generator=g, dtype=torch.float64) * 0.6 - 0.3
    points[:, 2] = 1.5 + 3.0 * torch.rand(16, generator=g, dtype=torch.float64)

    def _run(frames: torch.Tensor) -> torch.Tensor:
        views = [(frames[i], cams[i]) for i in range(2)]
        volume = build_geometry_volume(views, cams[0], planes, extractor, regularizer)
        features, _ = sample_volume(volume, points)
        return features

    _assert_directional_derivatives(_run, images, g, directions=2)


def test_sweep_volume_same_camera_reproduces_map():
    """Тест развёртки: src = ref даёт исходную карту на каждой плоскости"""
    cam = _front_camera(12, 8)
    planes = DepthPlaneSet.between(1.0, 6.0, 4)
    feature_map = torch.rand(3, 8, 12, dtype=torch.float64)
    sweep = build_sweep_volume(feature_map, cam, cam, planes)
    assert sweep.values.shape == (4, 3, 8, 12)
    assert bool(sweep.valid.all())
    for j in range(4):
        assert torch.allclose(sweep.values[j], feature_map, atol=1e-12)


def test_sweep_volume_pure_rotation_is_depth_independent():
    """Тест: при общем центре камер все плоскости развёртки одинаковы"""
    ref = _front_camera(12, 8)
    cos, sin = math.cos(0.05), math.sin(0.05)
    R = torch.tensor([[cos, 0.0, sin], [0.0, 1.0, 0.0], [-sin, 0.0, cos]], dtype=torch.float64)
    src = Camera.from_params(10.0, 10.0, 6.0, 4.0, R, [0.0, 0.0, 0.0], 12, 8, 1.0, 6.0)
    planes = DepthPlaneSet.between(1.0, 6.0, 5)
    feature_map = torch.rand(2, 8, 12, dtype=torch.float64)
    sweep = build_sweep_volume(feature_map, src, ref, planes)
    for j in range(1, 5):
        assert torch.allclose(sweep.values[j], sweep.values[0], atol=1e-9)
        assert torch.equal(sweep.valid[j], sweep.valid[0])


def test_sweep_volume_shape_mismatch():
    """Тест ошибки: карта не совпадает с размером камеры"""
    cam = _front_camera(12, 8)
    with pytest.raises(VolumeShapeError):
        build_sweep_volume(torch.rand(3, 8, 10), cam, cam, DepthPlaneSet.between(1.0, 6.0, 4))


def test_aggregate_variance_two_views_exact():
    """Тест двух видов: дисперсия ровно (a − b)²/4"""
    g = torch.Generator().manual_seed(2)
    a, b = _random_sweeps(g, 2, p_valid=1.1)
    cam = _front_camera(4, 4)
    planes = DepthPlaneSet.between(1.0, 6.0, 4)
    cost = aggregate_variance([a, b], cam, planes)
    expected = ((a.values - b.values) ** 2 / 4).permute(1, 0, 2, 3)
    assert torch.equal(cost.values, expected)


def test_aggregate_variance_matches_loop_oracle():
    """Тест дисперсии против поэлементного цикла (3 вида, частичная валидность)"""
    g = torch.Generator().manual_seed(3)
    sweeps = _random_sweeps(g, 3)
    cost = aggregate_variance(sweeps, _front_camera(4, 4), DepthPlaneSet.between(1.0, 6.0, 4))
    assert torch.max(torch.abs(cost.values - _variance_oracle(sweeps))) < 1e-6
    assert bool((cost.values >= 0).all())


def test_aggregate_variance_identical_views_zero():
    """Тест: одинаковые виды дают ровно нулевую дисперсию"""
    g = torch.Generator().manual_seed(4)
    (base,) = _random_sweeps(g, 1, p_valid=1.1)
    sweeps = [SweepVolume(values=base.values.clone(), valid=base.valid.clone()) for _ in range(5)]
    cost = aggregate_variance(sweeps, _front_camera(4, 4), DepthPlaneSet.between(1.0, 6.0, 4))
    assert float(cost.values.abs().max()) == 0.0


def test_aggregate_variance_permutation_invariant():
    """Тест: порядок видов не влияет на результат (побитово)"""
    g = torch.Generator().manual_seed(5)
    sweeps = _random_sweeps(g, 4)
    cam = _front_camera(4, 4)
    planes = DepthPlaneSet.between(1.0, 6.0, 4)
    reference = aggregate_variance(sweeps, cam, planes).values
    for order in ([3, 1, 0, 2], [2, 3, 1, 0]):
        permuted = aggregate_variance([sweeps[i] for i in order], cam, planes).values
        assert torch.equal(permuted, reference)


def test_aggregate_variance_empty_voxels_and_errors():
    """Тест вокселов без валидных видов и ошибок формы"""
    g = torch.Generator().manual_seed(6)
    sweeps = _random_sweeps(g, 2, p_valid=1.1)
    for sweep in sweeps:
        sweep.valid[0, 0, 0] = False
    cost = aggregate_variance(sweeps, _front_camera(4, 4), DepthPlaneSet.between(1.0, 6.0, 4))
    assert bool(cost.empty[0, 0, 0])
    assert float(cost.values[:, 0, 0, 0].abs().sum()) == 0.0
    assert int(cost.empty.sum()) == 1

    with pytest.raises(VolumeShapeError):
        aggregate_variance(sweeps[:1], _front_camera(4, 4), DepthPlaneSet.between(1.0, 6.0, 4))
    odd = SweepVolume(values=torch.zeros(4, 2, 4, 5, dtype=torch.float64), valid=torch.ones(4, 4, 5, dtype=torch.bool))
    with pytest.raises(VolumeShapeError):
        aggregate_variance([sweeps[0], odd], _front_camera(4, 4), DepthPlaneSet.between(1.0, 6.0, 4))


def test_regularize_shape_and_zero_projection():
    """Тест U-Net: форма сохраняется, нулевая проекция даёт нулевой объём"""
    torch.manual_seed(7)
    regularizer = CostRegularizer(view_slots=2, out_channels=8).eval()
    cam = _front_camera(16, 16)
    planes = DepthPlaneSet.between(1.0, 6.0, 16)
    g = torch.Generator().manual_seed(7)
    sweeps = [
        SweepVolume(
            values=torch.rand(16, FEATURE_CHANNELS, 16, 16, generator=g),
            valid=torch.ones(16, 16, 16, dtype=torch.bool),
        )
        for _ in range(2)
    ]
    colors = [
        SweepVolume(values=torch.rand(16, 3, 16, 16, generator=g), valid=torch.ones(16, 16, 16, dtype=torch.bool))
        for _ in range(2)
    ]
    cost = aggregate_variance(sweeps, cam, planes, colors=colors)
    assert cost.stacked().shape == (FEATURE_CHANNELS + 6, 16, 16, 16)
    with torch.no_grad():
        volume = regularize(cost, regularizer, VolumeKind.GEOMETRY)
        assert volume.values.shape == (8, 16, 16, 16)
        assert volume.kind is VolumeKind.GEOMETRY
        assert bool(torch.isfinite(volume.values).all())

        regularizer.project.weight.zero_()
        regularizer.project.bias.zero_()
        zero = regularize(cost, regularizer, VolumeKind.GEOMETRY)
    assert float(zero.values.abs().max()) == 0.0


def test_regularize_rejects_bad_sizes():
    """Тест ошибок U-Net: число каналов и некратный 8 размер"""
    regularizer = CostRegularizer(view_slots=2).eval()
    cam = _front_camera(12, 12)
    planes = DepthPlaneSet.between(1.0, 6.0, 8)
    sweep = SweepVolume(values=torch.rand(8, FEATURE_CHANNELS, 12, 12), valid=torch.ones(8, 12, 12, dtype=torch.bool))
    no_colors = aggregate_variance([sweep, sweep], cam, planes)
    with pytest.raises(VolumeShapeError):
        regularize(no_colors, regularizer, VolumeKind.GEOMETRY)
    color = SweepVolume(values=torch.rand(8, 3, 12, 12), valid=torch.ones(8, 12, 12, dtype=torch.bool))
    cost = aggregate_variance([sweep, sweep], cam, planes, colors=[color, color])
    with pytest.raises(VolumeShapeError):
        regularize(cost, regularizer, VolumeKind.GEOMETRY)


def test_geometry_volume_equals_manual_chain():
    """Тест: build_geometry_volume = extract → sweep → variance → regularize"""
    torch.manual_seed(8)
    extractor = FeatureExtractor().eval()
    regularizer = CostRegularizer(view_slots=3).eval()
    cams = [_front_camera(32, 32, focal=30.0, tx=0.1 * i) for i in range(3)]
    images = [torch.rand(32, 32, 3) for _ in range(3)]
    planes = DepthPlaneSet.between(1.0, 6.0, 8)
    ref = cams[1]
    with torch.no_grad():
        volume = build_geometry_volume(list(zip(images, cams)), ref, planes, extractor, regularizer)

        ref_small = ref.scaled(FEATURE_SCALE)
        sweeps, colors = [], []
        for image, cam in zip(images, cams):
            cam_small = cam.scaled(FEATURE_SCALE)
            sweeps.append(build_sweep_volume(extract_features(image, extractor), cam_small, ref_small, planes))
            small = downsample_colors(image, (cam_small.height, cam_small.width))
            colors.append(build_sweep_volume(small, cam_small, ref_small, planes))
        manual = regularize(aggregate_variance(sweeps, ref_small, planes, colors=colors), regularizer, VolumeKind.GEOMETRY)
    assert torch.equal(volume.values, manual.values)
    assert volume.values.shape == (8, 8, 8, 8)


def test_geometry_volume_shape_with_padding():
    """Тест формы: 8 ключевых кадров 64×48, 16 плоскостей → F_vol × 16 × 16 × 12"""
    torch.manual_seed(9)
    extractor = FeatureExtractor().eval()
    regularizer = CostRegularizer(view_slots=8, out_channels=8).eval()
    cams = [_front_camera(48, 64, focal=40.0, tx=0.05 * i) for i in range(8)]
    views = [(torch.rand(64, 48, 3), cam) for cam in cams]
    with torch.no_grad():
        volume = build_geometry_volume(views, cams[4], DepthPlaneSet.between(1.0, 6.0, 16), extractor, regularizer)
    assert volume.values.shape == (8, 16, 16, 12)
    assert volume.ref.height == 16 and volume.ref.width == 12


def test_identical_gray_keyframes_have_zero_cost():
    """Тест: одинаковые серые кадры с одной позы дают нулевую дисперсию"""
    torch.manual_seed(10)
    extractor = FeatureExtractor().eval()
    cam = _front_camera(32, 32, focal=30.0)
    gray = torch.full((32, 32, 3), 0.5)
    with torch.no_grad():
        cost = build_cost_volume([(gray, cam)] * 4, cam, DepthPlaneSet.between(1.0, 6.0, 8), extractor)
    assert float(cost.values.abs().max()) == 0.0


def test_volume_view_count_errors():
    """Тест ошибок: меньше двух видов и несовпадение числа слотов"""
    extractor = FeatureExtractor().eval()
    cam = _front_camera(32, 32, focal=30.0)
    image = torch.rand(32, 32, 3)
    planes = DepthPlaneSet.between(1.0, 6.0, 8)
    with pytest.raises(VolumeError):
        build_geometry_volume([(image, cam), None], cam, planes, extractor, CostRegularizer(2))
    with pytest.raises(MotionVolumeError):
        build_motion_volume([None, None, (image, cam), None], cam, planes, extractor, CostRegularizer(4))
    with pytest.raises(VolumeShapeError):
        build_geometry_volume([(image, cam)] * 3, cam, planes, extractor, CostRegularizer(2))


def test_motion_volume_isolated_from_geometry_weights():
    """Тест: изменение весов геометрии не меняет объём движения"""
    torch.manual_seed(11)
    network = ZestNetwork(TrainConfig(keyframe_count=2, depth_planes=8)).eval()
    cam = _front_camera(32, 32, focal=30.0)
    neighbors = [(torch.rand(32, 32, 3), _front_camera(32, 32, focal=30.0, tx=0.05 * i)) for i in range(4)]
    planes = DepthPlaneSet.between(1.0, 6.0, 8)
    with torch.no_grad():
        before = network.motion_volume(neighbors, cam, planes).values.clone()
        for p in list(network.geometry_extractor.parameters()) + list(network.geometry_regularizer.parameters()):
            p.add_(1.0)
        after = network.motion_volume(neighbors, cam, planes).values
    assert torch.equal(before, after)


def test_motion_volume_with_missing_neighbors():
    """Тест объёма движения на краю последовательности (две пустые ячейки)"""
    torch.manual_seed(12)
    network = ZestNetwork(TrainConfig(keyframe_count=2, depth_planes=8)).eval()
    cam = _front_camera(32, 32, focal=30.0)
    neighbors = [None, None, (torch.rand(32, 32, 3), cam), (torch.rand(32, 32, 3), cam)]
    with torch.no_grad():
        volume = network.motion_volume(neighbors, cam, DepthPlaneSet.between(1.0, 6.0, 8))
    assert volume.kind is VolumeKind.MOTION
    assert bool(torch.isfinite(volume.values).all())


def _voxel_point(vol: EncodingVolume, plane: float, row: float, col: float) -> torch.Tensor:
    """Точка в системе ref (R = I, t = 0) с непрерывными индексами (plane, row, col)"""
    depth = float(vol.planes.depths[int(plane)])
    x, y = col + 0.5, row + 0.5
    ray = torch.linalg.inv(vol.ref.K) @ torch.tensor([x, y, 1.0], dtype=torch.float64)
    return (depth * ray)[None]


def _toy_volume() -> EncodingVolume:
    g = torch.Generator().manual_seed(13)
    values = torch.rand(3, 4, 5, 6, generator=g, dtype=torch.float64)
    planes = DepthPlaneSet.between(1.0, 4.0, 4, DepthSpacing.UNIFORM_DEPTH)
    return EncodingVolume(values=values, kind=VolumeKind.GEOMETRY, ref=_front_camera(6, 5, focal=5.0), planes=planes)


def test_sample_volume_voxel_centers_and_midpoints():
    """Тест трилинейной выборки: центр воксела и середина между соседями"""
    vol = _toy_volume()
    features, oob = sample_volume(vol, _voxel_point(vol, 2, 3, 4))
    assert not bool(oob[0])
    assert torch.allclose(features[0], vol.values[:, 2, 3, 4], atol=1e-9)

    features, _ = sample_volume(vol, _voxel_point(vol, 1, 2, 2.5))
    expected = (vol.values[:, 1, 2, 2] + vol.values[:, 1, 2, 3]) / 2
    assert torch.allclose(features[0], expected, atol=1e-9)


def test_sample_volume_matches_trilinear_oracle():
    """Тест выборки против явной формулы по восьми углам"""
    vol = _toy_volume()
    g = torch.Generator().manual_seed(14)
    points = torch.rand(50, 3, generator=g, dtype=torch.float64)
    points[:, 0] = (points[:, 0] - 0.5) * 2.0
    points[:, 1] = (points[:, 1] - 0.5) * 1.5
    points[:, 2] = 1.2 + points[:, 2] * 2.6
    coords, oob = volume_coordinates(vol, points)
    features, _ = sample_volume(vol, points)
    for i in torch.nonzero(~oob).flatten().tolist():
        p, r, c = coords[i].tolist()
        p0, r0, c0 = int(p), int(r), int(c)
        expected = torch.zeros(3, dtype=torch.float64)
        for dp, dr, dc in itertools.product((0, 1), repeat=3):
            pi, ri, ci = min(p0 + dp, 3), min(r0 + dr, 4), min(c0 + dc, 5)
            weight = (p - p0 if dp else 1 - (p - p0)) * (r - r0 if dr else 1 - (r - r0)) * (c - c0 if dc else 1 - (c - c0))
            expected += weight * vol.values[:, pi, ri, ci]
        assert torch.allclose(features[i], expected, atol=1e-6)


def test_sample_volume_out_of_bounds_flag():
    """Тест флага выхода за объём: за камерой и за дальней плоскостью"""
    vol = _toy_volume()
    points = torch.tensor([[0.0, 0.0, -2.0], [0.0, 0.0, 10.0], [0.0, 0.0, 2.0]], dtype=torch.float64)
    features, oob = sample_volume(vol, points)
    assert oob.tolist() == [True, True, False]
    assert bool(torch.isfinite(features).all())
