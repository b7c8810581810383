"""Иерархия ошибок и сопоставление исключений с кодами выхода CLI."""

from __future__ import annotations

import logging
from typing import Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ZestError(Exception):
    """Базовая ошибка пайплайна"""

    exit_code = EXIT_UNEXPECTED


class ConfigError(ZestError):
    """Неверный конфиг: неизвестный ключ, значение вне диапазона"""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DataError(ZestError):
    """Ошибки входных данных (файлы сцен, форматы, размеры)"""

    exit_code = EXIT_DATA


class SceneFormatError(DataError):
    """Файл сцены не соответствует документированному формату"""

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class FormatError(DataError):
    """Бинарный файл потока/глубины повреждён или чужой"""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class GeometryError(ZestError):
    """Некорректная геометрия камер"""

    exit_code = EXIT_DATA


class CameraError(GeometryError):
    pass


class HomographyError(GeometryError):
    pass


class OutOfFrustumError(GeometryError):
    pass


class PixelBoundsError(GeometryError):
    pass


class VolumeError(ZestError):
    """Ошибки построения объёмов кодирования"""

    exit_code = EXIT_DATA


class VolumeShapeError(VolumeError):
    pass


class MotionVolumeError(VolumeError):
    pass


class RenderInputError(ZestError):
    """Длины списков отсчётов луча не совпадают"""

    exit_code = EXIT_DATA


class LossInputError(ZestError):
    """Несогласованные входы функции потерь"""

    exit_code = EXIT_DATA


class MetricError(ZestError):
    exit_code = EXIT_DATA


class NumericalError(ZestError):
    """Нечисловое значение функции потерь; term: виновная компонента"""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, term: Optional[str] = None, report=None):
        super().__init__(message)
        self.term = term
        self.report = report


class LeakageError(ZestError):
    """Оценочная сцена попала в обучение своего фолда"""

    exit_code = EXIT_NUMERIC


def exit_code_for(e: BaseException, *, operation: str = "command") -> int:
    """Преобразует исключение в код выхода CLI (и пишет его в лог)."""
    if isinstance(e, ConfigError):
        logger.error(f"[CONFIG] {operation}: {e}")
        return EXIT_CONFIG

    if isinstance(e, NumericalError):
        logger.error(f"[NUMERIC] {operation}: {e} (term={e.term})")
        return EXIT_NUMERIC

    if isinstance(e, ZestError):
        logger.error(f"[{type(e).__name__}] {operation}: {e}")
        return e.exit_code

    if isinstance(e, (FileNotFoundError, IsADirectoryError, NotADirectoryError)):
        logger.error(f"[DATA] {operation}: {e}")
        return EXIT_DATA

    logger.exception(f"[UNEXPECTED] {operation}: {type(e).__name__}: {e}")
    return EXIT_UNEXPECTED
