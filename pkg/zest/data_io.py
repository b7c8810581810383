"""
Чтение и запись сцен, псевдо-GT и рендеров, синтетические сцены с точной геометрией

Формат каталога сцены:
    frames/%05d.png            кадры
    cameras.txt                по строке на кадр: fx fy cx cy, R построчно, t, near far
    flow/%05d_fwd.raw, _bwd    псевдо-поток t→t+1 / t→t−1 (пиксели, dx dy)
    depth/%05d.raw             псевдо-глубина (расстояние вдоль луча)
    masks/%05d.png             маска динамического объекта (необязательно)

Бинарный .raw: магия ZSTF (поток) или ZSTD (глубина), u32 H, u32 W, u32 C,
затем f32 little-endian.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from zest.camera_geometry import Camera, all_pixels, generate_rays, project
from zest.errors import CameraError, DataError, FormatError, SceneFormatError
from zest.models import SyntheticSceneSpec

logger = logging.getLogger(__name__)

FLOW_MAGIC = b"ZSTF"
DEPTH_MAGIC = b"ZSTD"
_HEADER = struct.Struct("<4sIII")
CAMERA_FIELDS = 18
SIZE_MULTIPLE = 4


@dataclass
class SceneBundle:
    """
    Последовательность кадров одной сцены

    frames (N, H, W, 3) в [0, 1]; по камере на кадр; flow_fwd/flow_bwd (N, H, W, 2):
    поток к t+1 / t−1 (крайние кадры нулевые и не используются);
    depth (N, H, W); masks (N, H, W) bool.
    """

    scene_id: str
    frames: torch.Tensor
    cameras: List[Camera]
    flow_fwd: Optional[torch.Tensor] = None
    flow_bwd: Optional[torch.Tensor] = None
    depth: Optional[torch.Tensor] = None
    masks: Optional[torch.Tensor] = None
    source: Optional[str] = None

    def __post_init__(self):
        where = self.source or self.scene_id
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"{where}: frames must be N×H×W×3, got {tuple(self.frames.shape)}")
        if len(self.cameras) != self.n_frames:
            raise DataError(
                f"{where}: {len(self.cameras)} cameras for {self.n_frames} frames"
            )
        for index, cam in enumerate(self.cameras):
            if (cam.height, cam.width) != (self.height, self.width):
                raise DataError(
                    f"{where}: camera {index} is {cam.height}x{cam.width}, frames are {self.height}x{self.width}"
                )
        for name, tensor, tail in (
            ("flow_fwd", self.flow_fwd, (2,)),
            ("flow_bwd", self.flow_bwd, (2,)),
            ("depth", self.depth, ()),
            ("masks", self.masks, ()),
        ):
            if tensor is not None and tuple(tensor.shape) != (self.n_frames, self.height, self.width, *tail):
                raise DataError(f"{where}: {name} shape {tuple(tensor.shape)} does not match frames")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    @property
    def near(self) -> float:
        return min(cam.near for cam in self.cameras)

    @property
    def far(self) -> float:
        return max(cam.far for cam in self.cameras)

    @property
    def has_flow(self) -> bool:
        return self.flow_fwd is not None and self.flow_bwd is not None

    @property
    def has_depth(self) -> bool:
        return self.depth is not None

    def view(self, index: int) -> Tuple[torch.Tensor, Camera]:
        return self.frames[index], self.cameras[index]

    def pseudo_flow(self, time_index: int, offset: int) -> Optional[torch.Tensor]:
        """u_{t→t+offset} (H, W, 2) для offset = ±1"""
        if not self.has_flow or not 0 <= time_index + offset < self.n_frames:
            return None
        return self.flow_fwd[time_index] if offset > 0 else self.flow_bwd[time_index]


def read_raw(path, magic: bytes) -> np.ndarray:
    """Чтение .raw → (H, W, C) float32; FormatError при чужом/битом файле"""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(str(path), "file is shorter than the header")
    found, height, width, channels = _HEADER.unpack_from(data)
    if found != magic:
        raise FormatError(str(path), f"bad magic {found!r}, expected {magic!r}")
    expected = height * width * channels * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            str(path), f"payload has {len(payload)} bytes, header announces {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(height, width, channels).astype(np.float32)


def write_raw(path, array: np.ndarray, magic: bytes) -> Path:
    path = Path(path)
    array = np.asarray(array, dtype="<f4")
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise FormatError(str(path), f"expected H×W×C array, got shape {array.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width, channels = array.shape
    path.write_bytes(_HEADER.pack(magic, height, width, channels) + array.tobytes())
    return path


def load_flow(path) -> torch.Tensor:
    flow = read_raw(path, FLOW_MAGIC)
    if flow.shape[-1] != 2:
        raise FormatError(str(path), f"flow must have 2 channels, got {flow.shape[-1]}")
    return torch.from_numpy(flow.copy())


def save_flow(path, flow) -> Path:
    return write_raw(path, _to_numpy(flow), FLOW_MAGIC)


def load_depth(path) -> torch.Tensor:
    depth = read_raw(path, DEPTH_MAGIC)
    if depth.shape[-1] != 1:
        raise FormatError(str(path), f"depth must have 1 channel, got {depth.shape[-1]}")
    return torch.from_numpy(depth[..., 0].copy())


def save_depth(path, depth) -> Path:
    return write_raw(path, _to_numpy(depth), DEPTH_MAGIC)


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] → uint8, округление half-to-even"""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / np.float32(255.0)


def load_image(path) -> np.ndarray:
    """PNG → (H, W, 3) float32 в [0, 1]"""
    path = Path(path)
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as e:
        raise FormatError(str(path), f"cannot read image: {e}") from e
    return dequantize(array)


def save_image(path, image) -> Path:
    """(H, W, 3) или (H, W) в [0, 1] → 8-битный PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(_to_numpy(image))).save(path)
    return path


def render_filename(view: int, time: int) -> str:
    return f"render_v{view:03d}_t{time:05d}.png"


def save_render(image, path) -> Path:
    """Рендер (H, W, 3) → PNG с тем же квантованием, что и кадры"""
    return save_image(path, image)


def parse_cameras(path, width: int, height: int) -> List[Camera]:
    """cameras.txt → список камер; ошибки называют файл и строку"""
    path = Path(path)
    cameras: List[Camera] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != CAMERA_FIELDS:
            raise SceneFormatError(
                str(path), f"expected {CAMERA_FIELDS} numbers, got {len(parts)}", line=lineno
            )
        try:
            values = [float(p) for p in parts]
        except ValueError as e:
            raise SceneFormatError(str(path), f"not a number: {e}", line=lineno) from e
        fx, fy, cx, cy = values[:4]
        try:
            cameras.append(
                Camera.from_params(
                    fx, fy, cx, cy, values[4:13], values[13:16],
                    width, height, values[16], values[17],
                )
            )
        except CameraError as e:
            raise SceneFormatError(str(path), str(e), line=lineno) from e
    return cameras


def format_camera(cam: Camera) -> str:
    K = cam.K.tolist()
    values = [K[0][0], K[1][1], K[0][2], K[1][2]]
    values += cam.R.reshape(-1).tolist() + cam.t.tolist() + [cam.near, cam.far]
    return " ".join(repr(float(v)) for v in values)


def _reflect_pad(tensor: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Дополнение (…, H, W, C) отражением снизу и справа"""
    if not pad_h and not pad_w:
        return tensor
    channels_last = tensor.permute(0, 3, 1, 2)
    padded = F.pad(channels_last, (0, pad_w, 0, pad_h), mode="reflect")
    return padded.permute(0, 2, 3, 1).contiguous()


def pad_to_multiple(bundle: SceneBundle, multiple: int = SIZE_MULTIPLE) -> SceneBundle:
    """Отражённое дополнение кадров и псевдо-GT до кратного `multiple`; K не меняется"""
    pad_h = (-bundle.height) % multiple
    pad_w = (-bundle.width) % multiple
    if not pad_h and not pad_w:
        return bundle
    logger.debug(f"Padding {bundle.scene_id} by {pad_h}x{pad_w} pixels")
    height, width = bundle.height + pad_h, bundle.width + pad_w

    def _pad(tensor: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if tensor is None:
            return None
        if tensor.ndim == 3:
            return _reflect_pad(tensor[..., None].float(), pad_h, pad_w)[..., 0].to(tensor.dtype)
        return _reflect_pad(tensor, pad_h, pad_w)

    cameras = [
        Camera(K=c.K, R=c.R, t=c.t, width=width, height=height, near=c.near, far=c.far)
        for c in bundle.cameras
    ]
    return SceneBundle(
        scene_id=bundle.scene_id,
        frames=_pad(bundle.frames),
        cameras=cameras,
        flow_fwd=_pad(bundle.flow_fwd),
        flow_bwd=_pad(bundle.flow_bwd),
        depth=_pad(bundle.depth),
        masks=_pad(bundle.masks),
        source=bundle.source,
    )


def _frame_paths(directory: Path, suffix: str = ".png") -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix == suffix and p.stem.isdigit())


def _load_optional_series(
    directory: Path, n_frames: int, loader, pattern: str, skip: Sequence[int] = ()
) -> Optional[List[Optional[torch.Tensor]]]:
    if not directory.is_dir():
        return None
    series: List[Optional[torch.Tensor]] = []
    for index in range(n_frames):
        if index in skip:
            series.append(None)
            continue
        path = directory / pattern.format(index)
        if not path.exists():
            raise SceneFormatError(str(path), "missing file")
        series.append(loader(path))
    return series


def _stack_series(series, like: torch.Tensor) -> torch.Tensor:
    return torch.stack([s if s is not None else torch.zeros_like(like) for s in series])


def load_scene(path) -> SceneBundle:
    """
    Загрузка каталога сцены

    Отсутствующие flow/, depth/, masks/ допустимы (слабая супервизия отключается
    с предупреждением). Кадры дополняются до кратного 4. Каталог без frames/,
    но с poses_bounds.npy читается LLFF-адаптером.
    """
    root = Path(path)
    frames_dir = root / "frames"
    if not frames_dir.is_dir() and (root / "poses_bounds.npy").exists():
        return load_llff_scene(root)
    if not frames_dir.is_dir():
        raise SceneFormatError(str(frames_dir), "frames directory not found")
    frame_paths = _frame_paths(frames_dir)
    if not frame_paths:
        raise SceneFormatError(str(frames_dir), "no frames")
    images = []
    for frame_path in frame_paths:
        image = load_image(frame_path)
        if images and image.shape != images[0].shape:
            raise SceneFormatError(
                str(frame_path), f"size {image.shape[:2]} differs from {images[0].shape[:2]}"
            )
        images.append(image)
    frames = torch.from_numpy(np.stack(images))
    n_frames, height, width = frames.shape[:3]

    camera_path = root / "cameras.txt"
    if not camera_path.exists():
        raise SceneFormatError(str(camera_path), "camera file not found")
    cameras = parse_cameras(camera_path, width, height)
    if len(cameras) != n_frames:
        raise SceneFormatError(str(camera_path), f"{len(cameras)} cameras for {n_frames} frames")

    def _checked(loader, shape_tail):
        def _load(p: Path) -> torch.Tensor:
            tensor = loader(p)
            if tuple(tensor.shape) != (height, width, *shape_tail):
                raise SceneFormatError(
                    str(p), f"shape {tuple(tensor.shape)} does not match frames {height}x{width}"
                )
            return tensor
        return _load

    flow_dir = root / "flow"
    fwd = _load_optional_series(flow_dir, n_frames, _checked(load_flow, (2,)), "{:05d}_fwd.raw", skip=(n_frames - 1,))
    bwd = _load_optional_series(flow_dir, n_frames, _checked(load_flow, (2,)), "{:05d}_bwd.raw", skip=(0,))
    depth = _load_optional_series(root / "depth", n_frames, _checked(load_depth, ()), "{:05d}.raw")

    def _load_mask(p: Path) -> torch.Tensor:
        return torch.from_numpy(load_image(p).mean(axis=-1) > 0.5)

    masks = _load_optional_series(root / "masks", n_frames, _checked(_load_mask, ()), "{:05d}.png")

    flow_like = torch.zeros(height, width, 2)
    bundle = SceneBundle(
        scene_id=root.name,
        frames=frames,
        cameras=cameras,
        flow_fwd=_stack_series(fwd, flow_like) if fwd is not None else None,
        flow_bwd=_stack_series(bwd, flow_like) if bwd is not None else None,
        depth=torch.stack(depth) if depth is not None else None,
        masks=torch.stack(masks) if masks is not None else None,
        source=str(root),
    )
    if not bundle.has_flow:
        logger.warning(f"⚠️  {root}: no pseudo-flow, geometric loss disabled")
    if not bundle.has_depth:
        logger.warning(f"⚠️  {root}: no pseudo-depth, depth loss disabled")
    logger.info(f"📥 Loaded scene {bundle.scene_id}: {n_frames} frames {height}x{width}")
    return pad_to_multiple(bundle)


def save_scene(bundle: SceneBundle, path) -> Path:
    """Запись сцены в документированном формате"""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for index in range(bundle.n_frames):
        save_image(root / "frames" / f"{index:05d}.png", bundle.frames[index])
    lines = [format_camera(cam) for cam in bundle.cameras]
    (root / "cameras.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if bundle.has_flow:
        for index in range(bundle.n_frames):
            if index < bundle.n_frames - 1:
                save_flow(root / "flow" / f"{index:05d}_fwd.raw", bundle.flow_fwd[index])
            if index > 0:
                save_flow(root / "flow" / f"{index:05d}_bwd.raw", bundle.flow_bwd[index])
    if bundle.has_depth:
        for index in range(bundle.n_frames):
            save_depth(root / "depth" / f"{index:05d}.raw", bundle.depth[index])
    if bundle.masks is not None:
        for index in range(bundle.n_frames):
            save_image(root / "masks" / f"{index:05d}.png", bundle.masks[index].float())
    logger.info(f"✅ Scene {bundle.scene_id} written to {root}")
    return root


def load_llff_scene(path, scene_id: Optional[str] = None) -> SceneBundle:
    """
    Адаптер раскладки poses_bounds.npy + images/

    Позы LLFF: 3×5 матрицы камера→мир с осями [вниз, вправо, назад] и
    столбцом [H, W, f]; переводятся в мир→камера с осями OpenCV.
    Псевдо-GT не загружается.
    """
    root = Path(path)
    poses_path = root / "poses_bounds.npy"
    if not poses_path.exists():
        raise SceneFormatError(str(poses_path), "poses_bounds.npy not found")
    try:
        poses_bounds = np.load(poses_path)
    except (OSError, ValueError) as e:
        raise SceneFormatError(str(poses_path), f"cannot read: {e}") from e
    if poses_bounds.ndim != 2 or poses_bounds.shape[1] != 17:
        raise SceneFormatError(str(poses_path), f"expected N×17 array, got {poses_bounds.shape}")

    image_dir = root / "images"
    if not image_dir.is_dir():
        raise SceneFormatError(str(image_dir), "images directory not found")
    image_paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(image_paths) != poses_bounds.shape[0]:
        raise SceneFormatError(
            str(image_dir), f"{len(image_paths)} images for {poses_bounds.shape[0]} poses"
        )
    images = np.stack([load_image(p) for p in image_paths])
    height, width = images.shape[1:3]

    cameras = []
    for index, row in enumerate(poses_bounds):
        pose = row[:15].reshape(3, 5)
        pose_h, pose_w, focal = pose[:, 4]
        focal = focal * width / pose_w
        down, right, back, center = pose[:, 0], pose[:, 1], pose[:, 2], pose[:, 3]
        c2w = np.stack([right, down, -back], axis=1)
        R = c2w.T
        t = -R @ center
        near, far = float(row[15]), float(row[16])
        try:
            cameras.append(
                Camera.from_params(
                    focal, focal, width / 2.0, height / 2.0, R, t, width, height, near, far
                )
            )
        except CameraError as e:
            raise SceneFormatError(str(poses_path), f"pose {index}: {e}") from e
    bundle = SceneBundle(
        scene_id=scene_id or root.name,
        frames=torch.from_numpy(images),
        cameras=cameras,
        source=str(root),
    )
    logger.warning(f"⚠️  {root}: LLFF layout carries no pseudo-GT, weak supervision disabled")
    return pad_to_multiple(bundle)


@dataclass
class _Texture:
    """Гладкая процедурная текстура: сумма синусоид по каналам"""

    frequencies: np.ndarray  # (3, terms, 2)
    phases: np.ndarray  # (3, terms)
    amplitudes: np.ndarray  # (terms,)

    @classmethod
    def random(cls, rng: np.random.RandomState, max_frequency: float) -> "_Texture":
        return cls(
            frequencies=rng.uniform(-max_frequency, max_frequency, size=(3, 2, 2)),
            phases=rng.uniform(0.0, 2.0 * np.pi, size=(3, 2)),
            amplitudes=np.array([0.25, 0.2]),
        )

    def __call__(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        channels = []
        for c in range(3):
            value = torch.full_like(u, 0.5)
            for k, amplitude in enumerate(self.amplitudes):
                fu, fv = self.frequencies[c, k]
                value = value + amplitude * torch.sin(fu * u + fv * v + self.phases[c, k])
            channels.append(value)
        return torch.stack(channels, dim=-1)


@dataclass
class SyntheticScene:
    """Аналитическая сцена: текстурированный фон z = background_depth и движущийся квад"""

    spec: SyntheticSceneSpec
    cameras: List[Camera]
    background: _Texture
    foreground: _Texture

    def object_center(self, time_index: int) -> Tuple[float, float]:
        vx, vy = self.spec.velocity
        x0, y0 = self.spec.object_start
        return x0 + vx * time_index, y0 + vy * time_index

    def camera_for(self, time_index: int) -> Camera:
        return self.cameras[time_index % len(self.cameras)]

    def trace(self, cam: Camera, time_index: int) -> Dict[str, torch.Tensor]:
        """Трассировка всех пикселей: цвет, глубина вдоль луча, точка, маска объекта"""
        rays = generate_rays(cam, all_pixels(cam.height, cam.width), time_index)
        o, d = rays.origins, rays.directions
        half = self.spec.object_size / 2.0
        cx, cy = self.object_center(time_index)

        gamma_bg = (self.spec.background_depth - o[:, 2]) / d[:, 2]
        gamma_obj = (self.spec.object_depth - o[:, 2]) / d[:, 2]
        hit_obj = o + gamma_obj[:, None] * d
        on_object = (
            (gamma_obj > 0)
            & ((hit_obj[:, 0] - cx).abs() <= half)
            & ((hit_obj[:, 1] - cy).abs() <= half)
        )
        gamma = torch.where(on_object, gamma_obj, gamma_bg)
        points = o + gamma[:, None] * d
        color_bg = self.background(points[:, 0], points[:, 1])
        color_obj = self.foreground(points[:, 0] - cx, points[:, 1] - cy)
        color = torch.where(on_object[:, None], color_obj, color_bg)
        shape = (cam.height, cam.width)
        return {
            "color": color.reshape(*shape, 3),
            "depth": gamma.reshape(shape),
            "points": points.reshape(*shape, 3),
            "mask": on_object.reshape(shape),
        }

    def render_frame(self, cam: Camera, time_index: int) -> np.ndarray:
        """Квантованный кадр (H, W, 3) float32, как его хранит сцена"""
        color = self.trace(cam, time_index)["color"].numpy()
        return dequantize(quantize(color))

    def induced_flow(self, trace: Dict[str, torch.Tensor], time_index: int, offset: int) -> torch.Tensor:
        """Точный поток пикселей кадра t в кадр t+offset (камера и объект движутся)"""
        vx, vy = self.spec.velocity
        motion = torch.tensor([vx * offset, vy * offset, 0.0], dtype=torch.float64)
        points = trace["points"].reshape(-1, 3)
        moved = points + trace["mask"].reshape(-1, 1).to(points.dtype) * motion
        cam = self.camera_for(time_index)
        target_cam = self.camera_for(time_index + offset)
        xy_now = all_pixels(cam.height, cam.width)
        xy_now = torch.stack([xy_now[:, 1] + 0.5, xy_now[:, 0] + 0.5], dim=-1)
        xy_next, _ = project(target_cam, moved)
        return (xy_next - xy_now).reshape(cam.height, cam.width, 2)


def synthetic_cameras(spec: SyntheticSceneSpec) -> List[Camera]:
    """Камеры на отрезке по x, все смотрят в центр фона"""
    if spec.n_cameras == 1:
        offsets = [0.0]
    else:
        offsets = np.linspace(-spec.camera_spread, spec.camera_spread, spec.n_cameras).tolist()
    target = (0.0, 0.0, spec.background_depth)
    return [
        Camera.look_at(
            (x, 0.0, 0.0), target, spec.focal, spec.width, spec.height, spec.near, spec.far
        )
        for x in offsets
    ]


def make_synthetic_scene(spec: SyntheticSceneSpec, seed: Optional[int] = None) -> SyntheticScene:
    rng = np.random.RandomState(spec.texture_seed if seed is None else seed)
    return SyntheticScene(
        spec=spec,
        cameras=synthetic_cameras(spec),
        background=_Texture.random(rng, max_frequency=3.0),
        foreground=_Texture.random(rng, max_frequency=6.0),
    )


def generate_synthetic(spec: SyntheticSceneSpec, seed: Optional[int] = None) -> SceneBundle:
    """
    Синтетическая сцена с точными потоком и глубиной

    Кадр t снимается камерой t % n_cameras: каждый пиксель трассируется лучом
    из generate_rays до квада или фона. Поток получается проекцией (project)
    точек попадания, сдвинутых вместе с квадом, в камеру соседнего кадра, поэтому
    учитывает и смену камеры, и движение квада. Детерминирована для seed
    (по умолчанию texture_seed).
    """
    scene = make_synthetic_scene(spec, seed)
    frames, depth, masks, fwd, bwd = [], [], [], [], []
    for t in range(spec.n_frames):
        cam = scene.camera_for(t)
        trace = scene.trace(cam, t)
        frames.append(torch.from_numpy(dequantize(quantize(trace["color"].numpy()))))
        depth.append(trace["depth"].float())
        masks.append(trace["mask"])
        zeros = torch.zeros(spec.height, spec.width, 2)
        fwd.append(scene.induced_flow(trace, t, 1).float() if t < spec.n_frames - 1 else zeros)
        bwd.append(scene.induced_flow(trace, t, -1).float() if t > 0 else zeros)
    bundle = SceneBundle(
        scene_id=spec.scene_id,
        frames=torch.stack(frames),
        cameras=[scene.camera_for(t) for t in range(spec.n_frames)],
        flow_fwd=torch.stack(fwd),
        flow_bwd=torch.stack(bwd),
        depth=torch.stack(depth),
        masks=torch.stack(masks),
        source=f"synthetic:{spec.scene_id}",
    )
    logger.info(f"✅ Generated synthetic scene {spec.scene_id} ({spec.n_frames} frames)")
    return bundle
