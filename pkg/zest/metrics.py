"""Метрики качества изображения: PSNR, SSIM, внешний LPIPS и таблицы отчётов"""

import csv
import logging
import math
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from tenacity import (
    RetryError,
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from config.settings import settings
from zest.data_io import save_image
from zest.errors import MetricError
from zest.models import CrossValRow, FrameMetrics, MetricReport

logger = logging.getLogger(__name__)

SSIM_WINDOW = 5
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_float64(image) -> torch.Tensor:
    return torch.as_tensor(image).detach().to(dtype=torch.float64, device="cpu")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def psnr(pred, target, max_value: float = 1.0) -> float:
    """10·log10(MAX²/MSE); MSE = 0 даёт +inf"""
    if max_value <= 0:
        raise MetricError(f"max_value must be positive, got {max_value}")
    a, b = _as_float64(pred), _as_float64(target)
    _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def masked_psnr(pred, target, mask, max_value: float = 1.0) -> float:
    """PSNR только по пикселям маски (H, W)"""
    a, b = _as_float64(pred), _as_float64(target)
    _check_pair(a, b)
    selected = torch.as_tensor(mask).to(torch.bool)
    if tuple(selected.shape) != tuple(a.shape[:2]):
        raise MetricError(f"mask shape {tuple(selected.shape)} does not match image {tuple(a.shape[:2])}")
    if not bool(selected.any()):
        raise MetricError("mask selects no pixels")
    mse = float(((a[selected] - b[selected]) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_map(x: torch.Tensor, y: torch.Tensor, literal: bool, max_value: float) -> torch.Tensor:
    """x, y: (C, H, W) → карта SSIM (C, H−4, W−4) по валидной области окна"""
    window = gaussian_window().to(x.dtype)[None, None]
    channels = x.shape[0]
    kernel = window.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)

    def _filter(v: torch.Tensor) -> torch.Tensor:
        return F.conv2d(v[None], kernel, groups=channels)[0]

    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    mu_x, mu_y = _filter(x), _filter(y)
    var_x = _filter(x * x) - mu_x**2
    var_y = _filter(y * y) - mu_y**2
    if literal:
        # произведение стандартных отклонений вместо ковариации
        cross = var_x.clamp_min(0).sqrt() * var_y.clamp_min(0).sqrt()
    else:
        cross = _filter(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cross + c2)
    denominator = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return numerator / denominator


def ssim(pred, target, literal: bool = False, max_value: float = 1.0) -> float:
    """
    SSIM с гауссовым окном 5×5 (σ = 1.5), k1 = 0.01, k2 = 0.03

    Цветные изображения (H, W, C) считаются поканально, результат усредняется.
    literal=True: вариант с σ_x·σ_y вместо ковариации.
    """
    a, b = _as_float64(pred), _as_float64(target)
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise MetricError(f"expected H×W or H×W×C image, got {tuple(a.shape)}")
    height, width = a.shape[:2]
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise MetricError(f"image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(_ssim_map(a.permute(2, 0, 1), b.permute(2, 0, 1), literal, max_value).mean())


class LpipsHook:
    """
    Внешний перцептивный метрик: `command pred.png target.png` печатает число

    Таймауты и ненулевые коды выхода повторяются с экспоненциальной паузой;
    после исчерпания попыток возвращается None.
    """

    def __init__(
        self,
        command: Optional[str] = None,
        timeout: Optional[float] = None,
        retries: Optional[int] = None,
        backoff: float = 1.0,
    ):
        self.command = command if command is not None else settings.lpips_command
        self.timeout = timeout if timeout is not None else settings.lpips_timeout_s
        self.retries = max(1, retries if retries is not None else settings.lpips_retries)
        self.backoff = backoff

    @property
    def enabled(self) -> bool:
        return bool(self.command)

    def _invoke(self, pred_path: Path, target_path: Path) -> float:
        cmd = shlex.split(self.command) + [str(pred_path), str(target_path)]
        completed = subprocess.run(
            cmd, capture_output=True, text=True, timeout=self.timeout, check=True
        )
        for token in reversed(completed.stdout.split()):
            try:
                return float(token)
            except ValueError:
                continue
        raise ValueError(f"no number in LPIPS output {completed.stdout.strip()!r}")

    def _before_sleep(self, retry_state) -> None:
        logger.warning(
            f"🔄 Retrying LPIPS hook (attempt {retry_state.attempt_number}/{self.retries}) "
            f"after {retry_state.next_action.sleep if retry_state.next_action else 0} seconds"
        )

    def __call__(self, pred, target) -> Optional[float]:
        if not self.enabled:
            return None
        with tempfile.TemporaryDirectory(prefix="zest_lpips_") as tmp:
            pred_path = save_image(Path(tmp) / "pred.png", pred)
            target_path = save_image(Path(tmp) / "target.png", target)
            retrying = Retrying(
                stop=stop_after_attempt(self.retries),
                wait=wait_exponential(multiplier=self.backoff, min=0, max=10),
                retry=retry_if_exception_type(
                    (subprocess.TimeoutExpired, subprocess.CalledProcessError, ValueError, IndexError)
                ),
                reraise=True,
                before_sleep=self._before_sleep,
            )
            try:
                return retrying(self._invoke, pred_path, target_path)
            except (RetryError, subprocess.SubprocessError, OSError, ValueError, IndexError) as e:
                logger.warning(f"⚠️  LPIPS hook failed after {self.retries} attempts: {type(e).__name__}: {e}")
                return None


def evaluate_sequence(
    renders: Sequence,
    targets: Sequence,
    names: Optional[Sequence[str]] = None,
    literal: bool = False,
    lpips: Optional[LpipsHook] = None,
) -> MetricReport:
    """Метрики по кадрам и их средние; LPIPS в среднем только если есть у всех кадров"""
    if len(renders) != len(targets):
        raise MetricError(f"{len(renders)} renders for {len(targets)} targets")
    if not renders:
        raise MetricError("no frames to evaluate")
    names = list(names) if names is not None else [f"{i:05d}" for i in range(len(renders))]
    if len(names) != len(renders):
        raise MetricError(f"{len(names)} names for {len(renders)} frames")
    frames: List[FrameMetrics] = []
    for name, pred, target in zip(names, renders, targets):
        value = lpips(pred, target) if lpips is not None else None
        frames.append(
            FrameMetrics(frame=name, psnr=psnr(pred, target), ssim=ssim(pred, target, literal=literal), lpips=value)
        )
    lpips_values = [f.lpips for f in frames]
    return MetricReport(
        frames=frames,
        psnr=sum(f.psnr for f in frames) / len(frames),
        ssim=sum(f.ssim for f in frames) / len(frames),
        lpips=None if any(v is None for v in lpips_values) else sum(lpips_values) / len(frames),
    )


def _cap(value: float, cap: Optional[float]) -> float:
    cap = settings.psnr_table_cap if cap is None else cap
    return min(value, cap)


def _fmt(value: Optional[float], digits: int) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def format_table(report: MetricReport, cap: Optional[float] = None) -> str:
    """Текстовая таблица: frame, PSNR, SSIM, LPIPS и строка mean"""
    header = f"{'frame':<12}" + "".join(f"{name:>10}" for name in report.columns)
    lines = [header, "-" * len(header)]
    rows = [(f.frame, f.psnr, f.ssim, f.lpips) for f in report.frames]
    rows.append(("mean", report.psnr, report.ssim, report.lpips))
    for name, p, s, lp in rows:
        lines.append(f"{name:<12}{_fmt(_cap(p, cap), 2):>10}{_fmt(s, 4):>10}{_fmt(lp, 4):>10}")
    return "\n".join(lines)


def write_csv(report: MetricReport, path, cap: Optional[float] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", *report.columns])
        for f in report.frames:
            writer.writerow([f.frame, _cap(f.psnr, cap), f.ssim, "" if f.lpips is None else f.lpips])
        writer.writerow(["mean", _cap(report.psnr, cap), report.ssim, "" if report.lpips is None else report.lpips])
    return path


CROSSVAL_COLUMNS = (
    "Scene",
    "Scene-agnostic PSNR",
    "Scene-agnostic SSIM",
    "Scene-agnostic LPIPS",
    "Scene-specific PSNR",
    "Scene-specific SSIM",
    "Scene-specific LPIPS",
)


def _crossval_values(row: CrossValRow, cap: Optional[float]) -> List[Optional[float]]:
    return [
        _cap(row.psnr, cap),
        row.ssim,
        row.lpips,
        None if row.finetuned_psnr is None else _cap(row.finetuned_psnr, cap),
        row.finetuned_ssim,
        row.finetuned_lpips,
    ]


def _mean_row(rows: Sequence[CrossValRow], cap: Optional[float]) -> List[Optional[float]]:
    columns = list(zip(*(_crossval_values(r, cap) for r in rows)))
    means: List[Optional[float]] = []
    for column in columns:
        means.append(None if any(v is None for v in column) else sum(column) / len(column))
    return means


def format_crossval_table(rows: Sequence[CrossValRow], cap: Optional[float] = None) -> str:
    """Таблица фолдов: сцена-агностичные и (после дообучения) сцена-специфичные метрики"""
    if not rows:
        raise MetricError("no cross-validation rows")
    header = f"{'Scene':<16}{'Scene-agnostic':^30}{'Scene-specific':^30}"
    sub = f"{'':<16}" + "".join(f"{n:>10}" for n in ("PSNR", "SSIM", "LPIPS") * 2)
    lines = [header, sub, "-" * len(sub)]
    digits = (2, 4, 4, 2, 4, 4)
    for name, values in [(r.scene_id, _crossval_values(r, cap)) for r in rows] + [("mean", _mean_row(rows, cap))]:
        lines.append(f"{name:<16}" + "".join(f"{_fmt(v, d):>10}" for v, d in zip(values, digits)))
    return "\n".join(lines)


def write_crossval_csv(rows: Sequence[CrossValRow], path, cap: Optional[float] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CROSSVAL_COLUMNS)
        for row in rows:
            writer.writerow([row.scene_id, *("" if v is None else v for v in _crossval_values(row, cap))])
    return path
