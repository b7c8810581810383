"""Модель камеры-обскуры, гомографии плоскостей, проекция и генерация лучей"""

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from zest.errors import (
    CameraError,
    HomographyError,
    OutOfFrustumError,
    PixelBoundsError,
)


# Пиксель (row, col): это точка (col + 0.5, row + 0.5) в координатах изображения
PIXEL_CENTER = 0.5
_ORTHO_TOL = 1e-6

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class Camera:
    """
    Камера-обскура

    K: интринсики (пиксели), R/t: переход мир → камера (X_cam = R·X + t),
    width/height: размер кадра, near/far: границы сцены вдоль луча.
    """

    K: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        validate_camera(self)

    @property
    def center(self) -> torch.Tensor:
        """Центр камеры в мировых координатах: -Rᵀt"""
        return -(self.R.transpose(0, 1) @ self.t)

    @property
    def principal_axis(self) -> torch.Tensor:
        """Ось визирования (третья строка R)"""
        return self.R[2]

    @property
    def dtype(self) -> torch.dtype:
        return self.K.dtype

    @property
    def device(self) -> torch.device:
        return self.K.device

    def scaled(self, factor: float) -> "Camera":
        """Та же камера для карты с шагом 1/factor (K масштабируется, R/t нет)"""
        scale = torch.diag(self.K.new_tensor([factor, factor, 1.0]))
        return Camera(
            K=scale @ self.K,
            R=self.R,
            t=self.t,
            width=math.ceil(self.width * factor),
            height=math.ceil(self.height * factor),
            near=self.near,
            far=self.far,
        )

    def to(self, dtype: Optional[torch.dtype] = None, device=None) -> "Camera":
        return Camera(
            K=self.K.to(dtype=dtype, device=device),
            R=self.R.to(dtype=dtype, device=device),
            t=self.t.to(dtype=dtype, device=device),
            width=self.width,
            height=self.height,
            near=self.near,
            far=self.far,
        )

    @classmethod
    def from_params(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        R,
        t,
        width: int,
        height: int,
        near: float,
        far: float,
        dtype: torch.dtype = torch.float64,
    ) -> "Camera":
        K = torch.tensor([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], dtype=dtype)
        return cls(
            K=K,
            R=torch.as_tensor(R, dtype=dtype).reshape(3, 3),
            t=torch.as_tensor(t, dtype=dtype).reshape(3),
            width=int(width),
            height=int(height),
            near=float(near),
            far=float(far),
        )

    @classmethod
    def look_at(
        cls,
        center: Sequence[float],
        target: Sequence[float],
        focal: float,
        width: int,
        height: int,
        near: float,
        far: float,
        up: Sequence[float] = (0.0, -1.0, 0.0),
        dtype: torch.dtype = torch.float64,
    ) -> "Camera":
        """Камера в `center`, смотрящая на `target` (x вправо, y вниз, z вперёд)"""
        c = torch.as_tensor(center, dtype=dtype)
        z = torch.as_tensor(target, dtype=dtype) - c
        z = z / torch.linalg.norm(z)
        down = -torch.as_tensor(up, dtype=dtype)
        x = torch.linalg.cross(down, z)
        x = x / torch.linalg.norm(x)
        y = torch.linalg.cross(z, x)
        R = torch.stack([x, y, z])
        return cls.from_params(
            focal, focal, width / 2.0, height / 2.0, R, -(R @ c),
            width, height, near, far, dtype=dtype,
        )


def validate_camera(cam: Camera) -> None:
    """Проверка инвариантов камеры; CameraError при нарушении"""
    if cam.K.shape != (3, 3) or cam.R.shape != (3, 3) or cam.t.shape != (3,):
        raise CameraError(
            f"bad camera shapes: K{tuple(cam.K.shape)} R{tuple(cam.R.shape)} t{tuple(cam.t.shape)}"
        )
    K = cam.K.detach().double()
    R = cam.R.detach().double()
    if abs(K[1, 0]) > 1e-12 or abs(K[2, 0]) > 1e-12 or abs(K[2, 1]) > 1e-12:
        raise CameraError("K must be upper-triangular")
    if abs(K[2, 2] - 1.0) > 1e-12:
        raise CameraError("K[2,2] must be 1")
    if K[0, 0] <= 0 or K[1, 1] <= 0:
        raise CameraError("focal lengths must be positive")
    ortho = torch.max(torch.abs(R @ R.T - torch.eye(3, dtype=R.dtype)))
    if ortho >= _ORTHO_TOL:
        raise CameraError(f"R is not orthonormal (max deviation {float(ortho):.2e})")
    if abs(float(torch.linalg.det(R)) - 1.0) > _ORTHO_TOL:
        raise CameraError("det(R) must be +1")
    if not (0 < cam.near < cam.far):
        raise CameraError(f"expected 0 < near < far, got near={cam.near} far={cam.far}")
    if cam.width <= 0 or cam.height <= 0:
        raise CameraError("image size must be positive")


class DepthSpacing(str, enum.Enum):
    """Распределение плоскостей развёртки"""

    UNIFORM_DEPTH = "uniform_depth"
    UNIFORM_DISPARITY = "uniform_disparity"


@dataclass(frozen=True)
class DepthPlaneSet:
    """Упорядоченные глубины фронтальных плоскостей"""

    depths: torch.Tensor
    spacing: DepthSpacing = DepthSpacing.UNIFORM_DISPARITY

    def __post_init__(self):
        if self.depths.ndim != 1 or self.depths.numel() < 2:
            raise CameraError("depth plane set needs at least two planes")
        if bool((self.depths <= 0).any()):
            raise CameraError("depth planes must be positive")
        if bool((self.depths[1:] <= self.depths[:-1]).any()):
            raise CameraError("depth planes must be strictly increasing")

    def __len__(self) -> int:
        return int(self.depths.numel())

    @classmethod
    def between(
        cls,
        near: float,
        far: float,
        count: int,
        spacing: Union[DepthSpacing, str] = DepthSpacing.UNIFORM_DISPARITY,
        dtype: torch.dtype = torch.float64,
    ) -> "DepthPlaneSet":
        spacing = DepthSpacing(spacing)
        if not (0 < near < far):
            raise CameraError(f"expected 0 < near < far, got {near}, {far}")
        if spacing is DepthSpacing.UNIFORM_DEPTH:
            depths = torch.linspace(near, far, count, dtype=dtype)
        else:
            disparity = torch.linspace(1.0 / near, 1.0 / far, count, dtype=dtype)
            depths = 1.0 / disparity
        # концы без ошибок округления
        depths[0] = near
        depths[-1] = far
        return cls(depths=depths, spacing=spacing)

    def _coord(self, depth: torch.Tensor) -> torch.Tensor:
        if self.spacing is DepthSpacing.UNIFORM_DEPTH:
            return depth
        return -1.0 / depth

    def index_of(self, depth: torch.Tensor) -> torch.Tensor:
        """Непрерывный индекс плоскости (кусочно-линейно, с экстраполяцией за края)"""
        planes = self._coord(self.depths.to(depth.dtype))
        q = self._coord(depth)
        idx = torch.searchsorted(planes, q.detach().contiguous()).clamp(1, len(self) - 1)
        lo = planes[idx - 1]
        hi = planes[idx]
        return (idx - 1).to(depth.dtype) + (q - lo) / (hi - lo)


@dataclass
class Rays:
    """Пачка лучей: o + γ·d, γ ∈ [near, far]; pixels: (row, col), times: нормированное t"""

    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    pixels: torch.Tensor
    times: torch.Tensor

    def __len__(self) -> int:
        return int(self.origins.shape[0])

    def __getitem__(self, index) -> "Rays":
        return Rays(
            origins=self.origins[index],
            directions=self.directions[index],
            near=self.near[index],
            far=self.far[index],
            pixels=self.pixels[index],
            times=self.times[index],
        )


def pixel_to_image(pixels: torch.Tensor) -> torch.Tensor:
    """(row, col) → (x, y) центра пикселя"""
    return torch.stack([pixels[..., 1] + PIXEL_CENTER, pixels[..., 0] + PIXEL_CENTER], dim=-1)


def image_to_pixel(xy: torch.Tensor) -> torch.Tensor:
    """(x, y) → (row, col)"""
    return torch.stack([xy[..., 1] - PIXEL_CENTER, xy[..., 0] - PIXEL_CENTER], dim=-1)


def all_pixels(height: int, width: int, dtype: torch.dtype = torch.float64, device=None) -> torch.Tensor:
    """Все пиксели кадра построчно, (H*W, 2) в формате (row, col)"""
    rows, cols = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([rows.reshape(-1), cols.reshape(-1)], dim=-1)


def _inverse_intrinsics(K: torch.Tensor) -> torch.Tensor:
    det = K[0, 0] * K[1, 1]
    if float(torch.abs(det)) < 1e-12:
        raise HomographyError("intrinsic matrix is not invertible")
    return torch.linalg.inv(K)


def plane_homography(src: Camera, ref: Camera, depth: Scalar) -> torch.Tensor:
    """
    Гомография плоскости: пиксели ref → пиксели src

    Плоскость фронтальна в системе ref и лежит на глубине depth. Форма
    K_src·R_src·(I + (C_ref − C_src)·n_refᵀ / d)·R_refᵀ·K_ref⁻¹, где C: центры
    камер, n_ref: ось ref.
    Для depth формы (D,) возвращается (D, 3, 3); H[2,2] нормирован к 1.
    """
    d = torch.as_tensor(depth, dtype=ref.dtype, device=ref.device)
    if bool((d <= 0).any()):
        raise HomographyError(f"plane depth must be positive, got {depth}")
    K_ref_inv = _inverse_intrinsics(ref.K)
    _inverse_intrinsics(src.K)
    baseline = ref.center - src.center
    eye = torch.eye(3, dtype=ref.dtype, device=ref.device)
    shift = torch.outer(baseline, ref.principal_axis)
    M = eye + shift / d[..., None, None]
    H = src.K @ src.R @ M @ ref.R.transpose(0, 1) @ K_ref_inv
    scale = H[..., 2:3, 2:3]
    if bool((torch.abs(scale) < 1e-12).any()):
        raise HomographyError("homography cannot be normalized (H[2,2] = 0)")
    return H / scale


def project(cam: Camera, points: torch.Tensor, strict: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    π(K(R·X + t)) для точек (..., 3)

    Returns:
        (xy, in_front): координаты изображения (..., 2) и маска z > 0.
        Для точек за камерой xy не имеет смысла; при strict=True: OutOfFrustumError.
    """
    cam_points = points @ cam.R.transpose(0, 1).to(points.dtype) + cam.t.to(points.dtype)
    z = cam_points[..., 2]
    in_front = z > 0
    if strict and not bool(in_front.all()):
        raise OutOfFrustumError("point at or behind the camera plane")
    safe_z = torch.where(in_front, z, torch.ones_like(z))
    uvw = cam_points @ cam.K.transpose(0, 1).to(points.dtype)
    xy = uvw[..., :2] / safe_z[..., None]
    return xy, in_front


def generate_rays(cam: Camera, pixels: torch.Tensor, time: Scalar = 0.0) -> Rays:
    """
    Лучи через центры пикселей

    origin = −Rᵀt, direction = normalize(Rᵀ·K⁻¹·(col + ½, row + ½, 1)),
    [near, far] берутся из камеры.
    """
    pixels = torch.as_tensor(pixels, dtype=cam.dtype, device=cam.device).reshape(-1, 2)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if bool(((rows < 0) | (rows > cam.height - 1) | (cols < 0) | (cols > cam.width - 1)).any()):
        raise PixelBoundsError(f"pixel outside {cam.height}x{cam.width} image")
    xy = pixel_to_image(pixels)
    homogeneous = torch.cat([xy, torch.ones_like(xy[:, :1])], dim=-1)
    cam_dirs = homogeneous @ _inverse_intrinsics(cam.K).transpose(0, 1)
    world_dirs = cam_dirs @ cam.R
    directions = world_dirs / torch.linalg.norm(world_dirs, dim=-1, keepdim=True)
    n = pixels.shape[0]
    times = torch.as_tensor(time, dtype=cam.dtype, device=cam.device).expand(n).clone()
    return Rays(
        origins=cam.center.expand(n, 3).clone(),
        directions=directions,
        near=torch.full((n,), cam.near, dtype=cam.dtype, device=cam.device),
        far=torch.full((n,), cam.far, dtype=cam.dtype, device=cam.device),
        pixels=pixels,
        times=times,
    )


def _to_grid(xy: torch.Tensor, width: int, height: int) -> torch.Tensor:
    # align_corners=False: центр пикселя col ↔ x = col + 0.5
    gx = 2.0 * xy[..., 0] / width - 1.0
    gy = 2.0 * xy[..., 1] / height - 1.0
    return torch.stack([gx, gy], dim=-1)


def _inside(xy: torch.Tensor, width: int, height: int, tol: float = 1e-6) -> torch.Tensor:
    # весь след изображения [0, W] × [0, H], включая внешнюю половину крайних пикселей
    x, y = xy[..., 0], xy[..., 1]
    return (x >= -tol) & (x <= width + tol) & (y >= -tol) & (y <= height + tol)


def bilinear_sample(image: torch.Tensor, xy: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Билинейная выборка карты (C, H, W) в точках xy (N, 2)

    Returns:
        (values (N, C), valid (N,)); вне [0, W] × [0, H] значения нулевые,
        в полупикселе у края повторяется крайний пиксель.
    """
    channels, height, width = image.shape
    grid = _to_grid(xy.to(image.dtype), width, height).reshape(1, 1, -1, 2)
    values = F.grid_sample(
        image[None], grid, mode="bilinear", padding_mode="border", align_corners=False
    )[0, :, 0].transpose(0, 1)
    valid = _inside(xy, width, height)
    return values * valid[:, None].to(values.dtype), valid


def warp_image(
    features: torch.Tensor,
    H: torch.Tensor,
    out_size: Optional[Tuple[int, int]] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Обратный варп карты признаков гомографией (пиксели выхода → пиксели источника)

    features: (C, h, w) или (B, C, h, w); H: (3, 3) или (B, 3, 3).
    Выборка билинейная с повтором крайних пикселей; отсчёты вне [0, w] × [0, h]
    источника обнуляются и помечаются в маске.

    Returns:
        (warped, valid): той же размерности и маска (h, w) / (B, h, w).
    """
    batched = features.ndim == 4
    feats = features if batched else features[None]
    Hs = H if H.ndim == 3 else H[None]
    det = torch.linalg.det(Hs.detach().double())
    scale = torch.linalg.norm(Hs.detach().double(), dim=(-2, -1)) ** 3
    if bool((torch.abs(det) <= 1e-12 * scale).any()):
        raise HomographyError("singular homography")
    if Hs.shape[0] != feats.shape[0]:
        if feats.shape[0] != 1:
            raise HomographyError("batch of homographies does not match batch of maps")
        feats = feats.expand(Hs.shape[0], *feats.shape[1:])

    src_h, src_w = feats.shape[-2:]
    out_h, out_w = out_size if out_size is not None else (src_h, src_w)
    target = pixel_to_image(all_pixels(out_h, out_w, dtype=Hs.dtype, device=Hs.device))
    homogeneous = torch.cat([target, torch.ones_like(target[:, :1])], dim=-1)
    mapped = torch.einsum("bij,nj->bni", Hs, homogeneous)
    w = mapped[..., 2]
    in_front = w > 0
    safe_w = torch.where(in_front, w, torch.ones_like(w))
    src_xy = mapped[..., :2] / safe_w[..., None]

    grid = _to_grid(src_xy, src_w, src_h).to(feats.dtype).reshape(-1, out_h, out_w, 2)
    warped = F.grid_sample(
        feats, grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    valid = (_inside(src_xy, src_w, src_h) & in_front).reshape(-1, out_h, out_w)
    warped = warped * valid[:, None].to(warped.dtype)
    if not batched:
        return warped[0], valid[0]
    return warped, valid
