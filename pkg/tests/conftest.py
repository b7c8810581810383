"""Конфигурация для тестов"""

import os
import tempfile

# До импорта пакета: отдельный лог и отдельный журнал запусков.
_test_log_fd, _test_log_path = tempfile.mkstemp(suffix="_pytest.log")
os.close(_test_log_fd)
os.environ["ZEST_LOG_FILE"] = _test_log_path
_test_db_fd, _test_db_path = tempfile.mkstemp(suffix="_runs.db")
os.close(_test_db_fd)
os.environ["ZEST_RUN_DB_URL"] = f"sqlite:///{_test_db_path}"
os.environ["ZEST_DEVICE"] = "cpu"

import pytest
import torch

from config.settings import settings
from zest.camera_geometry import Camera
from zest.data_io import generate_synthetic
from zest.models import SyntheticSceneSpec, TrainConfig


@pytest.fixture(scope="function", autouse=True)
def run_db(monkeypatch, tmp_path):
    """Отдельная база журнала запусков на каждый тест (автоматически для всех тестов)"""
    db_url = f"sqlite:///{tmp_path / 'runs.db'}"
    monkeypatch.setattr(settings, "run_db_url", db_url)
    monkeypatch.setattr(settings, "lpips_command", None)
    monkeypatch.setattr(settings, "num_workers", 1)
    return db_url


@pytest.fixture
def tiny_config():
    """Минимальный конфиг: 2 ключевых кадра, 8 отсчётов, 16 плоскостей"""
    return TrainConfig(
        keyframe_count=2,
        samples_per_ray=8,
        ray_batch=16,
        depth_planes=16,
        total_steps=2,
        log_every=1,
        checkpoint_every=100,
        eval_frames=2,
        prefetch_batches=1,
        seed=0,
    )


@pytest.fixture
def tiny_spec():
    """Маленькая синтетическая сцена (кратна 4, объём не вырождается после U-Net)"""
    return SyntheticSceneSpec(
        scene_id="tiny",
        n_frames=6,
        height=32,
        width=48,
        n_cameras=3,
        focal=40.0,
    )


@pytest.fixture
def tiny_scene(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def camera_pair():
    """Две float64 камеры на базе 0.4, смотрящие в одну точку"""
    ref = Camera.look_at((0.0, 0.0, 0.0), (0.1, 0.05, 4.0), 50.0, 64, 48, 1.0, 6.0)
    src = Camera.look_at((0.4, -0.1, 0.2), (0.0, 0.0, 4.0), 55.0, 64, 48, 1.0, 6.0)
    return ref, src


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
