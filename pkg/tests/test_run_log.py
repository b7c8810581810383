"""Тесты журнала запусков"""

from sqlalchemy import inspect

from config.settings import settings
from zest.run_log import RunLedger


def test_ledger_uses_settings_url(run_db):
    ledger = RunLedger()
    assert ledger.url == run_db == settings.run_db_url
    tables = set(inspect(ledger.engine).get_table_names())
    assert {"train_runs", "train_steps"} <= tables
    ledger.dispose()


def test_record_and_read_steps(tmp_path):
    """Тест записи шагов и чтения сцен запуска"""
    ledger = RunLedger(f"sqlite:///{tmp_path / 'sub' / 'ledger.db'}")
    run = ledger.start_run("fold-a", "a", "0" * 64)
    other = ledger.start_run("fold-b", "b", "1" * 64)
    assert run != other

    ledger.record_step(run, 1, "b", 4, 0.5)
    ledger.record_step(run, 0, "c", 2)
    ledger.record_step(run, 2, "b", 3, 0.25)
    ledger.record_step(other, 0, "a", 1, 1.0)

    assert ledger.scene_ids(run) == {"b", "c"}
    assert ledger.scene_ids(other) == {"a"}
    steps = ledger.steps(run)
    assert [s.step for s in steps] == [0, 1, 2]
    assert steps[0].loss_total is None
    assert steps[1].target_frame == 4 and steps[1].loss_total == 0.5
    assert ledger.steps(12345) == []
    ledger.dispose()


def test_ledger_persists_between_instances(tmp_path):
    url = f"sqlite:///{tmp_path / 'ledger.db'}"
    first = RunLedger(url)
    run = first.start_run("train", None, "f" * 64)
    first.record_step(run, 0, "toy", 0, 0.1)
    first.dispose()

    second = RunLedger(url)
    assert second.scene_ids(run) == {"toy"}
    second.dispose()
