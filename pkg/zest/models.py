"""Pydantic модели конфигурации экспериментов и отчётов"""

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Literal, Optional, Tuple


class LossWeights(BaseModel):
    """Веса компонент функции потерь (rec, pho, occ=λ_w, blend=λ_b, ...)"""

    model_config = ConfigDict(extra="forbid")

    rec: float = Field(1.0, ge=0)
    pho: float = Field(1.0, ge=0)
    occ: float = Field(0.1, ge=0)
    blend: float = Field(1e-3, ge=0)
    cyc: float = Field(0.1, ge=0)
    flow_min: float = Field(0.01, ge=0)
    flow_sp: float = Field(0.1, ge=0)
    flow_temp: float = Field(0.1, ge=0)
    geo: float = Field(0.02, ge=0)
    depth: float = Field(0.04, ge=0)
    # geo/depth линейно затухают до нуля за столько шагов (None: 25% total_steps)
    decay_steps: Optional[int] = Field(None, ge=1)

    def decay_factor(self, step: int) -> float:
        """max(0, 1 - step/decay_steps) для слабой супервизии"""
        steps = self.decay_steps or 1
        return max(0.0, 1.0 - step / steps)

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(
            rec=0, pho=0, occ=0, blend=0, cyc=0, flow_min=0,
            flow_sp=0, flow_temp=0, geo=0, depth=0, decay_steps=1,
        )


class TrainConfig(BaseModel):
    """Гиперпараметры обучения и архитектуры"""

    model_config = ConfigDict(extra="forbid")

    # Кадры
    keyframe_count: int = Field(8, ge=2)
    # Шаг между ключевыми кадрами; None: floor(N / K)
    keyframe_stride: Optional[int] = Field(None, ge=1)
    neighbor_radius: int = Field(2, ge=1)  # 2 → M = 4 соседа
    pho_radius: int = Field(1, ge=1, le=2)

    # Рендер
    samples_per_ray: int = Field(128, ge=2)
    ray_batch: int = Field(1024, ge=1)
    depth_planes: int = Field(128, ge=2)
    depth_spacing: Literal["uniform_depth", "uniform_disparity"] = "uniform_disparity"
    spacing_aware_alpha: bool = False

    # Сети
    feature_volume_channels: int = Field(8, ge=1)
    max_flow: float = Field(0.5, gt=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)
    use_geometry_volume: bool = True
    use_motion_volume: bool = True

    # Оптимизация (Adam)
    learning_rate: float = Field(5e-4, gt=0)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    total_steps: int = Field(50000, ge=0)
    finetune_steps: int = Field(0, ge=0)
    checkpoint_every: int = Field(1000, ge=1)
    log_every: int = Field(50, ge=1)
    prefetch_batches: int = Field(2, ge=1)
    seed: int = 0

    # Кросс-валидация: сколько кадров отложенной сцены оценивать
    eval_frames: int = Field(4, ge=1)

    loss_weights: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def _resolve_decay(self) -> "TrainConfig":
        if self.loss_weights.decay_steps is None:
            self.loss_weights.decay_steps = max(1, self.total_steps // 4)
        return self

    @property
    def neighbor_count(self) -> int:
        return 2 * self.neighbor_radius


class RunConfig(TrainConfig):
    """Полный конфиг команды: TrainConfig + пути + режимы"""

    scenes: List[str] = Field(default_factory=list)
    out_dir: str = "runs/latest"
    mode: Literal["blend", "static", "dynamic"] = "blend"
    ssim_literal: bool = False
    resume: Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig.model_validate(
            self.model_dump(include=set(TrainConfig.model_fields))
        )


class SyntheticSceneSpec(BaseModel):
    """Синтетическая сцена: текстурированный фон + движущийся квад"""

    model_config = ConfigDict(extra="forbid")

    scene_id: str = "toy"
    n_frames: int = Field(12, ge=3)
    height: int = Field(48, ge=8)
    width: int = Field(64, ge=8)
    # Кадр t снимается камерой t % n_cameras (монокулярная «прыгающая» камера)
    n_cameras: int = Field(5, ge=1)
    focal: float = Field(60.0, gt=0)
    camera_spread: float = Field(0.3, ge=0)  # размах кольца камер по x
    background_depth: float = Field(4.0, gt=0)
    object_depth: float = Field(2.5, gt=0)
    object_size: float = Field(0.6, gt=0)
    object_start: Tuple[float, float] = (-0.35, 0.0)
    object_velocity: Tuple[float, float] = (0.06, 0.0)  # за кадр, в плоскости квада
    static: bool = False
    texture_seed: int = 0
    near: float = Field(1.0, gt=0)
    far: float = Field(6.0, gt=0)

    @model_validator(mode="after")
    def _check_depths(self) -> "SyntheticSceneSpec":
        if not (self.near < self.object_depth < self.background_depth < self.far):
            raise ValueError("expected near < object_depth < background_depth < far")
        return self

    @property
    def velocity(self) -> Tuple[float, float]:
        return (0.0, 0.0) if self.static else self.object_velocity


class FrameMetrics(BaseModel):
    """Метрики одного кадра"""

    frame: str
    psnr: float
    ssim: float
    lpips: Optional[float] = None


class MetricReport(BaseModel):
    """Отчёт по последовательности: по кадрам + средние (колонки PSNR, SSIM, LPIPS)"""

    frames: List[FrameMetrics]
    psnr: float
    ssim: float
    lpips: Optional[float] = None

    columns: Tuple[str, str, str] = ("PSNR", "SSIM", "LPIPS")


class CrossValRow(BaseModel):
    """Строка таблицы кросс-валидации: scene-agnostic и (опционально) scene-specific"""

    scene_id: str
    trained_on: List[str]
    psnr: float
    ssim: float
    lpips: Optional[float] = None
    finetuned_psnr: Optional[float] = None
    finetuned_ssim: Optional[float] = None
    finetuned_lpips: Optional[float] = None
