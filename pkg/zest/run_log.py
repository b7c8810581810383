"""Журнал запусков обучения: какие сцены участвовали в каких шагах"""

import logging
import time
from pathlib import Path
from typing import List, Optional, Set

from sqlalchemy import (
    BigInteger,
    Column,
    Float,
    ForeignKey,
    Index,
    Integer,
    String,
    create_engine,
    event,
)
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker
from sqlalchemy.pool import NullPool

from config.settings import settings

logger = logging.getLogger(__name__)

Base = declarative_base()


class TrainRun(Base):  # type: ignore
    """Запуск обучения (один фолд кросс-валидации или обычный train)"""

    __tablename__ = "train_runs"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String, nullable=False)
    # Отложенная сцена фолда; None для обычного обучения
    fold = Column(String, nullable=True)
    config_hash = Column(String(64), nullable=False)
    created_at = Column(BigInteger, nullable=False)

    steps = relationship("TrainStep", back_populates="run", cascade="all, delete-orphan")


class TrainStep(Base):  # type: ignore
    """Один шаг оптимизатора: из какой сцены и кадра был батч"""

    __tablename__ = "train_steps"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("train_runs.id"), nullable=False, index=True)
    step = Column(Integer, nullable=False)
    scene_id = Column(String, nullable=False)
    target_frame = Column(Integer, nullable=False)
    loss_total = Column(Float, nullable=True)

    run = relationship("TrainRun", back_populates="steps")

    __table_args__ = (Index("idx_run_scene", "run_id", "scene_id"),)


def make_engine(url: str) -> Engine:
    """
    Движок SQLAlchemy

    Для SQLite создаётся директория базы и включаются WAL и busy timeout:
    рендер-потоки и обучение пишут в одну базу.
    """
    connect_args = {}
    engine_kwargs = {}
    if url.startswith("sqlite:///"):
        db_path = Path(url.replace("sqlite:///", ""))
        if str(db_path) not in ("", ":memory:"):
            db_path.parent.mkdir(parents=True, exist_ok=True)
    if "sqlite" in url:
        connect_args = {"check_same_thread": False, "timeout": 30}
        engine_kwargs = {"poolclass": NullPool}

    engine = create_engine(url, connect_args=connect_args, **engine_kwargs)

    if "sqlite" in url:

        @event.listens_for(engine, "connect")
        def _set_sqlite_pragmas(dbapi_connection, connection_record):  # type: ignore[no-redef]
            cursor = dbapi_connection.cursor()
            try:
                cursor.execute("PRAGMA journal_mode=WAL;")
                cursor.execute("PRAGMA synchronous=NORMAL;")
                cursor.execute("PRAGMA temp_store=MEMORY;")
                cursor.execute("PRAGMA foreign_keys=ON;")
                cursor.execute("PRAGMA busy_timeout=5000;")
            finally:
                cursor.close()

    return engine


class RunLedger:
    """Запись и чтение журнала запусков"""

    def __init__(self, url: Optional[str] = None):
        self.url = url or settings.run_db_url
        self.engine = make_engine(self.url)
        self._session_factory = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        Base.metadata.create_all(bind=self.engine)

    def start_run(self, name: str, fold: Optional[str], config_hash: str) -> int:
        db = self._session_factory()
        try:
            run = TrainRun(
                name=name, fold=fold, config_hash=config_hash, created_at=int(time.time())
            )
            db.add(run)
            db.commit()
            logger.info(f"📥 Run '{name}' started (id={run.id}, fold={fold})")
            return int(run.id)
        finally:
            db.close()

    def record_step(
        self,
        run_id: int,
        step: int,
        scene_id: str,
        target_frame: int,
        loss_total: Optional[float] = None,
    ) -> None:
        db = self._session_factory()
        try:
            db.add(
                TrainStep(
                    run_id=run_id,
                    step=step,
                    scene_id=scene_id,
                    target_frame=target_frame,
                    loss_total=loss_total,
                )
            )
            db.commit()
        except Exception as e:
            db.rollback()
            logger.error(f"❌ Failed to record step {step} of run {run_id}: {e}")
            raise
        finally:
            db.close()

    def scene_ids(self, run_id: int) -> Set[str]:
        """Все сцены, из которых брались батчи в запуске"""
        db = self._session_factory()
        try:
            rows = db.query(TrainStep.scene_id).filter(TrainStep.run_id == run_id).distinct().all()
            return {row[0] for row in rows}
        finally:
            db.close()

    def steps(self, run_id: int) -> List[TrainStep]:
        db = self._session_factory()
        try:
            rows = (
                db.query(TrainStep)
                .filter(TrainStep.run_id == run_id)
                .order_by(TrainStep.step)
                .all()
            )
            # Объекты нужны после закрытия сессии
            for row in rows:
                db.expunge(row)
            return rows
        finally:
            db.close()

    def dispose(self) -> None:
        self.engine.dispose()
