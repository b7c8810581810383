"""Тесты выбора кадров, шагов обучения, чекпоинтов и кросс-валидации"""

import zipfile

import pytest
import torch

from zest.data_io import generate_synthetic
from zest.errors import ConfigError, DataError, FormatError, LeakageError
from zest.models import LossWeights
from zest.run_log import RunLedger
from zest.trainer import (
    Checkpoint,
    RayBatch,
    Trainer,
    cross_validate,
    eval_frame_indices,
    evaluate_scene,
    finetune,
    fit,
    gradient_audit,
    keyframe_slots,
    network_from_checkpoint,
    neighbor_slots,
    select_keyframes,
    select_neighbors,
)


def _parameters(network) -> dict:
    return {name: p.detach().clone() for name, p in network.named_parameters()}


def _states_close(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.allclose(a[k].float(), b[k].float(), atol=1e-6) for k in a)


def test_select_keyframes():
    """Тест ключевых кадров: λ = floor(N/K), индексы λ·j − 1"""
    assert select_keyframes(24, 8) == [2, 5, 8, 11, 14, 17, 20, 23]
    assert select_keyframes(8, 8) == list(range(8))
    assert select_keyframes(20, 3) == [5, 11, 17]
    assert select_keyframes(20, 3, stride=2) == [1, 3, 5]
    with pytest.raises(ConfigError) as excinfo:
        select_keyframes(7, 8)
    assert excinfo.value.key == "keyframe_count"
    with pytest.raises(ConfigError):
        select_keyframes(10, 4, stride=5)


def test_select_neighbors():
    """Тест соседей: обрезка по границам последовательности"""
    assert select_neighbors(5, 12) == [3, 4, 6, 7]
    assert select_neighbors(0, 12) == [1, 2]
    assert select_neighbors(11, 12) == [9, 10]
    assert select_neighbors(1, 12) == [0, 2, 3]
    assert neighbor_slots(0, 12) == [None, None, 1, 2]
    assert neighbor_slots(5, 12, radius=1) == [4, 6]


def test_keyframe_slots_exclude_target(tiny_config):
    """Тест: целевой кадр убирается из ключевых, если остаётся хотя бы два"""
    config = tiny_config.model_copy(update={"keyframe_count": 3})
    assert keyframe_slots(6, 3, config) == [1, None, 5]
    assert keyframe_slots(6, 3, config, exclude_target=False) == [1, 3, 5]
    assert keyframe_slots(6, 0, config) == [1, 3, 5]
    # с двумя ключевыми кадрами исключение оставило бы один
    assert keyframe_slots(6, 2, tiny_config) == [2, 5]


def test_eval_frame_indices():
    """Тест равномерного выбора кадров оценки"""
    assert eval_frame_indices(10, 4) == [0, 3, 6, 9]
    assert eval_frame_indices(3, 5) == [0, 1, 2]
    assert eval_frame_indices(10, 1) == [5]


def test_zero_weights_leave_parameters_unchanged(tiny_scene, tiny_config):
    """Тест: при всех λ = 0 два шага не меняют параметры"""
    config = tiny_config.model_copy(update={"loss_weights": LossWeights.zeros()})
    trainer = Trainer(config)
    before = _parameters(trainer.network)
    for _ in range(2):
        batch = trainer.sample_batch([tiny_scene])
        report = trainer.train_step(tiny_scene, batch)
        assert float(report.total) == 0.0
    after = _parameters(trainer.network)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert trainer.step == 2
    assert trainer.network.version == 2


def test_train_step_reports_terms(tiny_scene, tiny_config):
    """Тест шага обучения: все компоненты конечны, geo/depth есть при псевдо-GT"""
    trainer = Trainer(tiny_config)
    batch = trainer.sample_batch([tiny_scene])
    assert batch.pixels.shape == (tiny_config.ray_batch, 2)
    assert 0 <= batch.time_index < tiny_scene.n_frames
    report = trainer.train_step(tiny_scene, batch)
    values = report.values()
    for name in ("rec", "occ", "blend", "flow_min", "flow_sp", "flow_temp", "pho", "cyc"):
        assert name in values
    if tiny_scene.has_flow:
        assert "geo" in values
    assert all(v == v for v in values.values())


def _updated_sets(scene, config, weights: LossWeights) -> set:
    """Наборы параметров, изменённые одним шагом с заданными λ"""
    trainer = Trainer(config.model_copy(update={"loss_weights": weights}))
    sets = trainer.network.parameter_sets()
    before = {name: [p.detach().clone() for p in module.parameters()] for name, module in sets.items()}
    trainer.train_step(scene, trainer.sample_batch([scene]))
    return {
        name
        for name, module in sets.items()
        if any(not torch.equal(old, p.detach()) for old, p in zip(before[name], module.parameters()))
    }


def test_static_and_dynamic_terms_update_disjoint_sets(tiny_scene, tiny_config):
    """Тест: статические компоненты меняют только G и статическое поле, динамические только M и динамическое"""
    static_only = LossWeights.zeros().model_copy(update={"blend": 1.0})
    dynamic_only = LossWeights.zeros().model_copy(
        update={"pho": 1.0, "occ": 1.0, "cyc": 1.0, "flow_min": 1.0, "flow_sp": 1.0, "flow_temp": 1.0}
    )
    static_sets = _updated_sets(tiny_scene, tiny_config, static_only)
    dynamic_sets = _updated_sets(tiny_scene, tiny_config, dynamic_only)
    assert "static_field" in static_sets
    assert static_sets <= {"geometry_extractor", "geometry_regularizer", "static_field"}
    assert "dynamic_field" in dynamic_sets
    assert dynamic_sets <= {"motion_extractor", "motion_regularizer", "dynamic_field"}
    assert not static_sets & dynamic_sets


def test_sample_batch_is_reproducible(tiny_scene, tiny_config):
    """Тест: одинаковый сид даёт одинаковые батчи"""
    a = Trainer(tiny_config).sample_batch([tiny_scene])
    b = Trainer(tiny_config).sample_batch([tiny_scene])
    assert a.time_index == b.time_index
    assert torch.equal(a.pixels, b.pixels)


def test_checkpoint_round_trip(tmp_path, tiny_scene, tiny_config):
    """Тест чекпоинта: сохранение и загрузка без потерь"""
    trainer = Trainer(tiny_config)
    trainer.train_step(tiny_scene, trainer.sample_batch([tiny_scene]))
    checkpoint = trainer.checkpoint()
    path = checkpoint.save(tmp_path / "ckpt" / "step.zip")
    assert path.exists()
    assert not path.with_suffix(".zip.tmp").exists()

    loaded = Checkpoint.load(path)
    assert loaded.step == 1 and loaded.seed == tiny_config.seed
    assert loaded.config == tiny_config
    assert loaded.config_hash == checkpoint.config_hash
    assert _states_close(loaded.network_state, checkpoint.network_state)
    assert torch.equal(loaded.sampler_state, checkpoint.sampler_state)

    network = network_from_checkpoint(loaded)
    assert network.version == 1
    assert _states_close(network.state_dict(), checkpoint.network_state)


def test_checkpoint_rejects_corrupt_files(tmp_path, tiny_config):
    """Тест чекпоинта: чужой файл, неверный хэш конфига, другая версия формата"""
    garbage = tmp_path / "garbage.zip"
    garbage.write_bytes(b"not a zip archive")
    with pytest.raises(FormatError):
        Checkpoint.load(garbage)

    checkpoint = Trainer(tiny_config).checkpoint()
    good = checkpoint.save(tmp_path / "good.zip")
    with zipfile.ZipFile(good) as archive:
        entries = {name: archive.read(name) for name in archive.namelist()}

    def _rewrite(name: str, manifest: str):
        path = tmp_path / name
        with zipfile.ZipFile(path, "w") as archive:
            for entry, data in entries.items():
                archive.writestr(entry, manifest if entry == "MANIFEST" else data)
        return path

    manifest = entries["MANIFEST"].decode("utf-8")
    tampered = manifest.replace(checkpoint.config_hash, "0" * 64)
    with pytest.raises(FormatError):
        Checkpoint.load(_rewrite("tampered.zip", tampered))
    future = manifest.replace("format_version = 1", "format_version = 2")
    with pytest.raises(FormatError):
        Checkpoint.load(_rewrite("future.zip", future))


def test_checkpoint_architecture_mismatch(tiny_config):
    """Тест: чекпоинт другой архитектуры даёт ConfigError"""
    checkpoint = Trainer(tiny_config).checkpoint()
    other = tiny_config.model_copy(update={"keyframe_count": 3})
    with pytest.raises(ConfigError):
        network_from_checkpoint(checkpoint, other)


def test_fit_validates_scenes(tiny_scene, tiny_config):
    """Тест fit: пустой список и повтор scene_id"""
    with pytest.raises(DataError):
        fit([], tiny_config)
    with pytest.raises(DataError):
        fit([tiny_scene, tiny_scene], tiny_config)


@pytest.mark.slow
def test_fit_is_deterministic_and_logged(tmp_path, tiny_scene, tiny_config):
    """Тест: два запуска с одним сидом совпадают, шаги пишутся в журнал"""
    ledger = RunLedger()
    seen = []
    first = fit(
        [tiny_scene],
        tiny_config,
        checkpoint_dir=str(tmp_path / "a"),
        ledger=ledger,
        on_step=lambda step, report, batch: seen.append((step, batch.time_index)),
    )
    second = fit([tiny_scene], tiny_config)
    assert first.step == second.step == tiny_config.total_steps
    assert _states_close(first.network_state, second.network_state)
    assert (tmp_path / "a" / "last.zip").exists()
    assert [s for s, _ in seen] == [0, 1]

    runs = ledger.steps(1)
    assert [row.step for row in runs] == [0, 1]
    assert {row.scene_id for row in runs} == {"tiny"}
    assert [row.target_frame for row in runs] == [t for _, t in seen]
    ledger.dispose()


@pytest.mark.slow
def test_resume_matches_uninterrupted_run(tiny_scene, tiny_config):
    """Тест: 1 шаг + продолжение до 2 совпадает с непрерывными 2 шагами"""
    straight = fit([tiny_scene], tiny_config)
    half = fit([tiny_scene], tiny_config.model_copy(update={"total_steps": 1}))
    resumed = fit([tiny_scene], tiny_config, resume=half)
    assert resumed.step == 2
    assert _states_close(straight.network_state, resumed.network_state)
    assert torch.equal(straight.sampler_state, resumed.sampler_state)


def test_finetune(tiny_scene, tiny_config):
    """Тест дообучения: 0 шагов возвращает тот же чекпоинт"""
    checkpoint = Trainer(tiny_config).checkpoint()
    assert finetune(checkpoint, tiny_scene, tiny_config, steps=0) is checkpoint


@pytest.mark.slow
def test_finetune_starts_from_checkpoint_weights(tiny_scene, tiny_config):
    """Тест дообучения: один шаг от весов чекпоинта, шаги считаются заново"""
    base = fit([tiny_scene], tiny_config)
    tuned = finetune(base, tiny_scene, tiny_config, steps=1)
    assert tuned.step == 1
    assert tuned.config.total_steps == 1
    assert not _states_close(base.network_state, tuned.network_state)


def test_gradient_audit_reaches_every_parameter_set(tiny_scene, tiny_config):
    """Тест: L_rec даёт ненулевой градиент всем шести наборам параметров"""
    trainer = Trainer(tiny_config)
    pixels = torch.stack([torch.arange(16) % 32, (torch.arange(16) * 7) % 48], dim=-1)
    batch = RayBatch(
        scene_index=0,
        scene_id=tiny_scene.scene_id,
        time_index=2,
        pixels=pixels,
        rng_state=trainer.generator.get_state(),
    )
    norms = gradient_audit(trainer.network, tiny_scene, tiny_config, batch)
    assert set(norms) == {
        "geometry_extractor",
        "motion_extractor",
        "geometry_regularizer",
        "motion_regularizer",
        "static_field",
        "dynamic_field",
    }
    for name, norm in norms.items():
        assert norm > 0.0, name


def test_evaluate_scene(tiny_scene, tiny_config):
    """Тест оценки сцены: строки по выбранным кадрам"""
    trainer = Trainer(tiny_config)
    report = evaluate_scene(trainer.network, tiny_scene, tiny_config, frames=[1, 4])
    assert [row.frame for row in report.frames] == ["tiny:00001", "tiny:00004"]
    assert report.psnr > 0
    assert report.lpips is None


@pytest.mark.slow
def test_cross_validate_two_scenes(tiny_spec, tiny_config):
    """Тест кросс-валидации: фолд на сцену, отложенная сцена не участвует в обучении"""
    scenes = [
        generate_synthetic(tiny_spec),
        generate_synthetic(tiny_spec.model_copy(update={"scene_id": "other", "texture_seed": 1})),
    ]
    config = tiny_config.model_copy(update={"total_steps": 1, "eval_frames": 1})
    rows = cross_validate(scenes, config)
    assert [row.scene_id for row in rows] == ["tiny", "other"]
    assert rows[0].trained_on == ["other"]
    assert rows[1].trained_on == ["tiny"]
    assert all(row.psnr > 0 for row in rows)
    assert all(row.finetuned_psnr is None for row in rows)


def test_cross_validate_detects_leakage(monkeypatch, tiny_spec, tiny_config):
    """Тест: сцена фолда в журнале его обучения даёт LeakageError"""
    scenes = [
        generate_synthetic(tiny_spec),
        generate_synthetic(tiny_spec.model_copy(update={"scene_id": "other"})),
    ]
    config = tiny_config.model_copy(update={"total_steps": 1})
    ledger = RunLedger()
    monkeypatch.setattr(ledger, "scene_ids", lambda run_id: {"tiny", "other"})
    with pytest.raises(LeakageError):
        cross_validate(scenes, config, ledger=ledger)
    with pytest.raises(DataError):
        cross_validate(scenes[:1], config, ledger=ledger)
