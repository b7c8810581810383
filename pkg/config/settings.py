"""Конфигурация процесса zest (окружение ZEST_* и .env)"""

from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional


class Settings(BaseSettings):
    """Настройки процесса (не эксперимента: гиперпараметры живут в TrainConfig)"""

    # Вычисления
    device: str = "cpu"
    # Сколько потоков одновременно рендерят чанки лучей (ZEST_NUM_WORKERS)
    num_workers: int = 1
    # Лучей в одном чанке при рендере полного кадра
    render_chunk: int = 2048

    # Логирование
    log_level: str = "INFO"
    log_file: Optional[str] = "./logs/zest.log"
    log_max_bytes: int = 10485760  # 10MB
    log_backup_count: int = 5  # Хранить 5 ротированных файлов

    # Журнал запусков (аудит сцен по шагам обучения)
    run_db_url: str = "sqlite:///./runs/zest_runs.db"

    # Внешний LPIPS: исполняемый файл получает два пути к PNG и печатает число
    lpips_command: Optional[str] = None
    lpips_timeout_s: float = 60.0
    lpips_retries: int = 3

    # В таблицах PSNR = +inf заменяется этим значением
    psnr_table_cap: float = 99.0

    model_config = SettingsConfigDict(
        env_prefix="ZEST_", env_file=".env", case_sensitive=False
    )

    @property
    def worker_count(self) -> int:
        return max(1, self.num_workers)


settings = Settings()
