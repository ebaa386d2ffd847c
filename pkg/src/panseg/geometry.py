"""Sliding-window geometry over panoramas plus raster resize/crop and PNG IO.

Windows slide horizontally only (panoramas are wide) and must tile the image
width exactly; a non-tiling (width, patch, stride) triple is an error so the
coverage arithmetic stays exact. Nothing wraps across the ERP seam.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DegeneratePatchError,
    EmptyResultError,
    GeometryMismatchError,
    NonTilingError,
)

IGNORE_INDEX = 255

FORWARD = "forward"
REVERSE = "reverse"


@dataclasses.dataclass(frozen=True)
class ImageGeometry:
    width: int
    height: int
    channels: int = 3

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise GeometryMismatchError(f"degenerate geometry {self}")


@dataclasses.dataclass(frozen=True)
class WindowPlan:
    """Horizontal sliding-window plan; offsets are stored in forward order."""

    patch_size: int
    stride: int
    offsets: tuple[int, ...]
    direction: str = FORWARD

    @property
    def count(self) -> int:
        return len(self.offsets)

    @property
    def width(self) -> int:
        return self.offsets[-1] + self.patch_size

    def ordered_offsets(self) -> tuple[int, ...]:
        """Offsets in traversal order (reverse direction walks right-to-left)."""
        if self.direction == REVERSE:
            return tuple(reversed(self.offsets))
        return self.offsets

    def reversed(self) -> "WindowPlan":
        other = REVERSE if self.direction == FORWARD else FORWARD
        return dataclasses.replace(self, direction=other)


@dataclasses.dataclass
class PatchSequence:
    """Ordered square crops of one raster, in plan traversal order."""

    plan: WindowPlan
    patches: list[np.ndarray]
    source_geometry: ImageGeometry

    @property
    def offsets(self) -> tuple[int, ...]:
        return self.plan.ordered_offsets()

    def __len__(self) -> int:
        return len(self.patches)


@dataclasses.dataclass
class CoverageMap:
    counts: np.ndarray  # (H, W) ints

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


def plan_windows(width: int, patch_size: int, stride: int, direction: str = FORWARD) -> WindowPlan:
    """Plan N = (width - patch_size) / stride + 1 exact-tiling window offsets."""
    if patch_size <= 0:
        raise DegeneratePatchError(f"patch_size must be positive, got {patch_size}")
    if stride <= 0:
        raise NonTilingError(f"stride must be positive, got {stride}")
    if direction not in (FORWARD, REVERSE):
        raise NonTilingError(f"unknown direction {direction!r}")
    if patch_size > width:
        raise NonTilingError(f"patch_size {patch_size} exceeds width {width}")
    span = width - patch_size
    if span % stride != 0:
        raise NonTilingError(f"(width - patch_size) = {span} not divisible by stride {stride}")
    n = span // stride + 1
    offsets = tuple(i * stride for i in range(n))
    return WindowPlan(patch_size=patch_size, stride=stride, offsets=offsets, direction=direction)


def _check_plan_fits(image: np.ndarray, plan: WindowPlan) -> None:
    h, w = image.shape[:2]
    if plan.width != w:
        raise GeometryMismatchError(f"plan tiles width {plan.width}, image width is {w}")
    if plan.patch_size != h:
        raise GeometryMismatchError(f"patch_size {plan.patch_size} != image height {h} (square crops)")


def extract_sequence(image: np.ndarray, plan: WindowPlan) -> PatchSequence:
    """Cut the image into its overlapping square patch sequence."""
    _check_plan_fits(image, plan)
    h, w = image.shape[:2]
    channels = 1 if image.ndim == 2 else image.shape[2]
    patches = [
        np.ascontiguousarray(image[:, x : x + plan.patch_size])
        for x in plan.ordered_offsets()
    ]
    return PatchSequence(plan=plan, patches=patches, source_geometry=ImageGeometry(w, h, channels))


def reassemble(seq: PatchSequence) -> np.ndarray:
    """Write patches back at their offsets; overlaps are identical slices."""
    geo = seq.source_geometry
    shape = (geo.height, geo.width) if geo.channels == 1 and seq.patches[0].ndim == 2 else (
        geo.height,
        geo.width,
        geo.channels,
    )
    out = np.zeros(shape, dtype=seq.patches[0].dtype)
    for x, patch in zip(seq.offsets, seq.patches):
        out[:, x : x + seq.plan.patch_size] = patch
    return out


def compute_coverage(plans: list[WindowPlan], geometry: ImageGeometry) -> CoverageMap:
    """Per-pixel count of windows covering each pixel, summed over plans."""
    counts_x = np.zeros(geometry.width, dtype=np.int64)
    for plan in plans:
        if plan.width != geometry.width:
            raise GeometryMismatchError(
                f"plan tiles width {plan.width}, geometry width is {geometry.width}"
            )
        for x in plan.offsets:
            counts_x[x : x + plan.patch_size] += 1
    counts = np.broadcast_to(counts_x, (geometry.height, geometry.width)).copy()
    return CoverageMap(counts=counts)


def crop_erp_black_regions(
    image: np.ndarray,
    labels: np.ndarray | None = None,
    top_frac: float = 0.25,
    bottom_frac: float = 0.25,
):
    """Drop the top/bottom row bands an ERP render wastes near the poles."""
    if top_frac < 0 or bottom_frac < 0 or top_frac + bottom_frac >= 1:
        raise EmptyResultError(f"bad crop fractions ({top_frac}, {bottom_frac})")
    h = image.shape[0]
    top = int(round(top_frac * h))
    bottom = int(round(bottom_frac * h))
    if top + bottom >= h:
        raise EmptyResultError(f"crop removes all {h} rows")
    if labels is not None and labels.shape[0] != h:
        raise GeometryMismatchError("labels height differs from image height")
    stop = h - bottom
    cropped = image[top:stop].copy()
    if labels is None:
        return cropped
    return cropped, labels[top:stop].copy()


def _interp_weights(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners-false source indices and weights for 1-D bilinear resize."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize(image: np.ndarray, target: ImageGeometry | tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize a raster; 'bilinear' for images, 'nearest' for label maps."""
    if isinstance(target, ImageGeometry):
        th, tw = target.height, target.width
    else:
        th, tw = target
    if th < 1 or tw < 1:
        raise GeometryMismatchError(f"degenerate resize target ({th}, {tw})")
    h, w = image.shape[:2]
    if (h, w) == (th, tw):
        return image.copy()
    if mode == "nearest":
        ys = np.minimum(((np.arange(th) + 0.5) * (h / th)).astype(np.int64), h - 1)
        xs = np.minimum(((np.arange(tw) + 0.5) * (w / tw)).astype(np.int64), w - 1)
        return image[np.ix_(ys, xs)].copy() if image.ndim == 2 else image[ys][:, xs].copy()
    if mode != "bilinear":
        raise GeometryMismatchError(f"unknown resize mode {mode!r}")
    ylo, yhi, yf = _interp_weights(th, h)
    xlo, xhi, xf = _interp_weights(tw, w)
    arr = image.astype(np.float64)
    rows = arr[ylo] * (1 - yf).reshape(-1, *([1] * (arr.ndim - 1))) + arr[yhi] * yf.reshape(
        -1, *([1] * (arr.ndim - 1))
    )
    xf_col = xf.reshape(1, -1, *([1] * (arr.ndim - 2)))
    out = rows[:, xlo] * (1 - xf_col) + rows[:, xhi] * xf_col
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(image.dtype)
    return out.astype(image.dtype)


# ---------------------------------------------------------------------------
# PNG conventions: RGB images, single-channel class-index labels, 255 = ignore


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def write_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_labels(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def write_labels(path, labels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")
