"""Фоновая подготовка батчей лучей, пока идёт шаг оптимизатора"""

import logging
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Generic, Iterator, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class _ProducerFailure:
    """Исключение производителя, переданное потребителю через очередь"""

    error: BaseException


class RayBatchPrefetcher(Generic[T]):
    """
    Один поток-производитель и ограниченная очередь

    produce(i) вызывается строго по порядку i = start_index, start_index+1, ...
    в одном потоке, поэтому последовательность батчей детерминирована при
    фиксированном генераторе. Ошибка производителя поднимается в get().
    """

    def __init__(
        self,
        produce: Callable[[int], T],
        count: int,
        depth: int = 2,
        start_index: int = 0,
    ):
        self._produce = produce
        self._count = count
        self._start_index = start_index
        self._queue: "queue.Queue[object]" = queue.Queue(maxsize=max(1, depth))
        self._thread: Optional[threading.Thread] = None
        self._stop_event = threading.Event()
        self._is_running = False
        self._delivered = 0

    def start(self) -> None:
        if self._is_running:
            logger.warning("Prefetch worker is already running")
            return
        self._is_running = True
        self._stop_event.clear()
        self._thread = threading.Thread(target=self._worker, name="zest-prefetch", daemon=True)
        self._thread.start()
        logger.debug(f"✅ Prefetch worker started ({self._count} batches)")

    def stop(self) -> None:
        if not self._is_running:
            return
        self._is_running = False
        self._stop_event.set()
        # Освобождаем место, чтобы производитель не висел на put()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        logger.debug("✅ Prefetch worker stopped")

    def _put(self, item: object) -> bool:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _worker(self) -> None:
        try:
            for offset in range(self._count):
                if self._stop_event.is_set():
                    return
                item = self._produce(self._start_index + offset)
                if not self._put(item):
                    return
        except Exception as e:
            logger.error(f"❌ Error in prefetch worker: {e}")
            self._put(_ProducerFailure(e))
            return
        # None: сигнал конца
        self._put(None)

    def get(self) -> Optional[T]:
        """Следующий батч; None, когда производитель закончил"""
        if not self._is_running:
            raise RuntimeError("prefetcher is not running")
        item = self._queue.get()
        if isinstance(item, _ProducerFailure):
            raise item.error
        if item is not None:
            self._delivered += 1
        return item  # type: ignore[return-value]

    @property
    def delivered(self) -> int:
        return self._delivered

    def __iter__(self) -> Iterator[T]:
        while True:
            item = self.get()
            if item is None:
                return
            yield item

    def __enter__(self) -> "RayBatchPrefetcher[T]":
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()
