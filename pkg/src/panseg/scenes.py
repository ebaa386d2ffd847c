"""Synthetic pin2pan scene rendering and dataset generation.

Scenes are closed rooms (axis-aligned, y up) containing box obstacles and
thin wall panels. Both camera models ray-cast the same surfaces from the
same position, so a pinhole view and an equirectangular view of one scene
are label-consistent by construction. Target-domain images get a
photometric brightness/contrast shift so the two domains differ by more
than projection geometry.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import geometry
from .errors import (
    BadLabelValueError,
    ConfigError,
    GeometryMismatchError,
    IoError,
    MissingFileError,
)
from .geometry import IGNORE_INDEX, ImageGeometry

CLASS_NAMES = ("floor", "ceiling", "wall", "box", "panel", "void")
NUM_CLASSES = len(CLASS_NAMES)
FLOOR, CEILING, WALL, BOX, PANEL, VOID = range(NUM_CLASSES)

# base albedo per class, flat shading
CLASS_COLORS = np.array(
    [
        [0.55, 0.40, 0.26],  # floor
        [0.85, 0.85, 0.80],  # ceiling
        [0.62, 0.66, 0.72],  # wall
        [0.78, 0.22, 0.18],  # box
        [0.16, 0.48, 0.70],  # panel
        [0.05, 0.05, 0.05],  # void (never rendered; scenes are closed)
    ],
    dtype=np.float64,
)

_LIGHT_DIR = np.array([0.35, 0.82, 0.45])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.45

PINHOLE = "pinhole"
EQUIRECTANGULAR = "equirectangular"


@dataclasses.dataclass(frozen=True)
class SceneBox:
    class_id: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    room: tuple[float, float, float]  # (x, y, z) extents in meters, y up
    boxes: tuple[SceneBox, ...]
    rng_seed: int = 0


@dataclasses.dataclass(frozen=True)
class CameraSpec:
    position: tuple[float, float, float]
    yaw: float = 0.0
    pitch: float = 0.0
    fov_deg: float = 70.0
    width: int = 64
    height: int = 64
    projection: str = PINHOLE


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def trace_directions(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """First-hit class and lambert normal for unit direction rays.

    Returns (class_ids (N,), normals (N, 3)). The room shell guarantees a hit.
    """
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = d.shape[0]
    room = np.asarray(scene.room)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (room[None, :] - origin[None, :]) / d
        t_lo = (0.0 - origin[None, :]) / d
    t_exit = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
    axis = np.argmin(t_exit, axis=1)
    best_t = t_exit[np.arange(n), axis]

    classes = np.full(n, WALL, dtype=np.int64)
    vertical = axis == 1
    classes[vertical & (d[:, 1] > 0)] = CEILING
    classes[vertical & (d[:, 1] < 0)] = FLOOR
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = -np.sign(d[np.arange(n), axis])

    for box in scene.boxes:
        lo = np.asarray(box.lo)
        hi = np.asarray(box.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[None, :] - origin[None, :]) / d
            t2 = (hi[None, :] - origin[None, :]) / d
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        t_near = near.max(axis=1)
        t_far = far.min(axis=1)
        hit = (t_near > 1e-9) & (t_near <= t_far) & (t_near < best_t)
        if not hit.any():
            continue
        enter_axis = np.argmax(near, axis=1)
        best_t = np.where(hit, t_near, best_t)
        classes = np.where(hit, box.class_id, classes)
        idx = np.flatnonzero(hit)
        normals[idx] = 0.0
        normals[idx, enter_axis[idx]] = -np.sign(d[idx, enter_axis[idx]])
    return classes, normals


def camera_directions(camera: CameraSpec) -> np.ndarray:
    """World-space unit ray directions through every pixel center, (H*W, 3)."""
    w, h = camera.width, camera.height
    xs = (np.arange(w) + 0.5)
    ys = (np.arange(h) + 0.5)
    if camera.projection == EQUIRECTANGULAR:
        theta = xs / w * 2.0 * np.pi - np.pi + camera.yaw
        phi = np.pi / 2.0 - ys / h * np.pi + camera.pitch
        th, ph = np.meshgrid(theta, phi)
        d = np.stack(
            [np.cos(ph) * np.sin(th), np.sin(ph), -np.cos(ph) * np.cos(th)], axis=-1
        )
        return d.reshape(-1, 3)
    if camera.projection != PINHOLE:
        raise ConfigError(f"unknown projection {camera.projection!r}")
    if not 0.0 < camera.fov_deg < 180.0:
        raise ConfigError(f"pinhole fov must lie in (0, 180), got {camera.fov_deg}")
    t = np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    px = (2.0 * xs / w - 1.0) * t
    py = -(2.0 * ys / h - 1.0) * t
    gx, gy = np.meshgrid(px, py)
    d = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    rot = _rot_y(camera.yaw) @ _rot_x(camera.pitch)
    return (d.reshape(-1, 3) @ rot.T)


def render(scene: SceneSpec, camera: CameraSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view: (RGB uint8 image, class-index uint8 labels)."""
    dirs = camera_directions(camera)
    classes, normals = trace_directions(scene, np.asarray(camera.position), dirs)
    lambert = np.maximum(normals @ _LIGHT_DIR, 0.0)
    intensity = _AMBIENT + (1.0 - _AMBIENT) * lambert
    rgb = CLASS_COLORS[classes] * intensity[:, None]
    h, w = camera.height, camera.width
    image = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).reshape(h, w, 3)
    labels = classes.astype(np.uint8).reshape(h, w)
    return image, labels


def apply_photometric_shift(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    """Contrast around mid-gray plus a brightness offset, on uint8 RGB."""
    x = image.astype(np.float64) / 255.0
    x = contrast * (x - 0.5) + 0.5 + brightness
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# random scene construction


def random_scene(seed: int) -> SceneSpec:
    """Closed room with floor boxes and wall panels; camera-safe center."""
    rng = np.random.default_rng(seed)
    rx = float(rng.uniform(4.5, 8.0))
    ry = float(rng.uniform(2.6, 3.8))
    rz = float(rng.uniform(4.5, 8.0))
    center = np.array([rx / 2.0, 0.0, rz / 2.0])

    boxes: list[SceneBox] = []
    for _ in range(int(rng.integers(2, 5))):
        sx = float(rng.uniform(0.5, 1.6))
        sy = float(rng.uniform(0.5, min(1.8, ry - 0.8)))
        sz = float(rng.uniform(0.5, 1.6))
        for _attempt in range(20):
            cx = float(rng.uniform(0.3 + sx / 2, rx - 0.3 - sx / 2))
            cz = float(rng.uniform(0.3 + sz / 2, rz - 0.3 - sz / 2))
            # keep a clear cylinder around the camera position at room center
            if np.hypot(cx - center[0], cz - center[2]) > 0.9 + max(sx, sz) / 2:
                boxes.append(
                    SceneBox(BOX, (cx - sx / 2, 0.0, cz - sz / 2), (cx + sx / 2, sy, cz + sz / 2))
                )
                break

    for _ in range(int(rng.integers(1, 4))):
        wall = int(rng.integers(0, 4))
        pw = float(rng.uniform(0.8, 2.2))
        ph = float(rng.uniform(0.6, 1.4))
        depth = float(rng.uniform(0.04, 0.10))
        y0 = float(rng.uniform(0.7, ry - ph - 0.2))
        if wall in (0, 1):  # x = 0 or x = rx walls, panel extends along z
            z0 = float(rng.uniform(0.2, max(0.21, rz - pw - 0.2)))
            x0 = 0.0 if wall == 0 else rx - depth
            boxes.append(SceneBox(PANEL, (x0, y0, z0), (x0 + depth, y0 + ph, z0 + pw)))
        else:  # z = 0 or z = rz walls, panel extends along x
            x0 = float(rng.uniform(0.2, max(0.21, rx - pw - 0.2)))
            z0 = 0.0 if wall == 2 else rz - depth
            boxes.append(SceneBox(PANEL, (x0, y0, z0), (x0 + pw, y0 + ph, z0 + depth)))

    return SceneSpec(room=(rx, ry, rz), boxes=tuple(boxes), rng_seed=seed)


def scene_camera_position(scene: SceneSpec, rng: np.random.Generator) -> tuple[float, float, float]:
    rx, _, rz = scene.room
    return (
        rx / 2.0 + float(rng.uniform(-0.25, 0.25)),
        float(rng.uniform(1.2, 1.7)),
        rz / 2.0 + float(rng.uniform(-0.25, 0.25)),
    )


# ---------------------------------------------------------------------------
# dataset generation and loading


@dataclasses.dataclass
class GenerationConfig:
    scene_count: int = 40
    seed: int = 0
    source_size: int = 64
    source_views: int = 3
    source_fov_deg: float = 70.0
    target_width: int = 256
    target_height: int = 64
    erp_crop_top: float = 0.25
    erp_crop_bottom: float = 0.25
    jitter_brightness: float = 0.18
    jitter_contrast: float = 0.35
    split: str = "train"

    @classmethod
    def from_dict(cls, raw: dict) -> "GenerationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown generation keys: {sorted(unknown)}")
        return cls(**raw)


@dataclasses.dataclass
class Sample:
    image_path: Path
    label_path: Path
    domain: str  # "source" | "target"
    scene_index: int

    def load_image(self) -> np.ndarray:
        if not self.image_path.exists():
            raise MissingFileError(str(self.image_path))
        return geometry.read_image(self.image_path)

    def load_labels(self, num_classes: int | None = None) -> np.ndarray:
        if not self.label_path.exists():
            raise MissingFileError(str(self.label_path))
        labels = geometry.read_labels(self.label_path)
        if num_classes is not None:
            bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
            if bad.any():
                raise BadLabelValueError(
                    f"{self.label_path}: label {int(labels[bad][0])} outside [0, {num_classes})"
                )
        return labels


@dataclasses.dataclass
class DatasetManifest:
    split: str
    class_count: int
    class_names: tuple[str, ...]
    samples: list[Sample]
    root: Path

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "class_count": self.class_count,
            "class_names": list(self.class_names),
            "samples": [
                {
                    "image": str(s.image_path.relative_to(self.root)),
                    "label": str(s.label_path.relative_to(self.root)),
                    "domain": s.domain,
                    "scene": s.scene_index,
                }
                for s in self.samples
            ],
        }


class Dataset:
    """Lazy sample access with invariant checks on first touch."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.samples = manifest.samples
        self.class_count = manifest.class_count

    def __len__(self) -> int:
        return len(self.samples)

    def domain(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.domain == name]

    def load_pair(self, sample: Sample) -> tuple[np.ndarray, np.ndarray]:
        image = sample.load_image()
        labels = sample.load_labels(self.class_count)
        if image.shape[:2] != labels.shape:
            raise GeometryMismatchError(
                f"{sample.image_path}: image {image.shape[:2]} vs labels {labels.shape}"
            )
        return image, labels


def generate_dataset(scene_count: int, seed: int, out_dir, config: GenerationConfig | None = None) -> DatasetManifest:
    """Render paired pinhole (source) and ERP (target) views; write manifest.

    Deterministic per seed: identical seeds produce byte-identical files.
    """
    cfg = dataclasses.replace(config or GenerationConfig(), scene_count=scene_count, seed=seed)
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc

    crop = cfg.erp_crop_top + cfg.erp_crop_bottom
    if crop >= 1.0:
        raise ConfigError("ERP crop fractions remove the whole image")
    erp_height = int(round(cfg.target_height / (1.0 - crop)))

    rng = np.random.default_rng(cfg.seed)
    samples: list[Sample] = []
    for s in range(cfg.scene_count):
        scene = random_scene(int(rng.integers(0, 2**31 - 1)))
        position = scene_camera_position(scene, rng)
        base_yaw = float(rng.uniform(0.0, 2.0 * np.pi))

        for v in range(cfg.source_views):
            yaw = base_yaw + v * 2.0 * np.pi / max(cfg.source_views, 1)
            pitch = float(rng.uniform(-0.12, 0.12))
            cam = CameraSpec(
                position=position,
                yaw=yaw,
                pitch=pitch,
                fov_deg=cfg.source_fov_deg,
                width=cfg.source_size,
                height=cfg.source_size,
                projection=PINHOLE,
            )
            image, labels = render(scene, cam)
            img_path = out_dir / "images" / f"scene{s:03d}_pin{v}.png"
            lab_path = out_dir / "labels" / f"scene{s:03d}_pin{v}.png"
            geometry.write_image(img_path, image)
            geometry.write_labels(lab_path, labels)
            samples.append(Sample(img_path, lab_path, "source", s))

        erp_cam = CameraSpec(
            position=position,
            yaw=base_yaw,
            width=cfg.target_width,
            height=erp_height,
            projection=EQUIRECTANGULAR,
        )
        image, labels = render(scene, erp_cam)
        if crop > 0:
            image, labels = geometry.crop_erp_black_regions(
                image, labels, cfg.erp_crop_top, cfg.erp_crop_bottom
            )
        brightness = float(rng.uniform(-cfg.jitter_brightness, cfg.jitter_brightness))
        contrast = float(rng.uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast))
        image = apply_photometric_shift(image, brightness, contrast)
        img_path = out_dir / "images" / f"scene{s:03d}_erp.png"
        lab_path = out_dir / "labels" / f"scene{s:03d}_erp.png"
        geometry.write_image(img_path, image)
        geometry.write_labels(lab_path, labels)
        samples.append(Sample(img_path, lab_path, "target", s))

    manifest = DatasetManifest(
        split=cfg.split,
        class_count=NUM_CLASSES,
        class_names=CLASS_NAMES,
        samples=samples,
        root=out_dir,
    )
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFileError(str(manifest_path))
    with open(manifest_path) as fh:
        raw = json.load(fh)
    root = manifest_path.parent
    samples = [
        Sample(root / s["image"], root / s["label"], s["domain"], int(s.get("scene", -1)))
        for s in raw["samples"]
    ]
    manifest = DatasetManifest(
        split=raw["split"],
        class_count=int(raw["class_count"]),
        class_names=tuple(raw["class_names"]),
        samples=samples,
        root=root,
    )
    return Dataset(manifest)
