"""Volume and label grids, bounding boxes, resampling and the ``.vgf`` file format.

A ``.vgf`` pair is a JSON header ``<stem>.vgf.json`` next to a raw little-endian
payload ``<stem>.vgf.raw`` stored z-major (z slowest). Intensities are written as
float32, labels as uint8.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
Shape3 = Tuple[int, int, int]

VOLUME_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")


class GridError(ValueError):
    """Invalid grid geometry or contents."""


class GridFormatError(GridError):
    """A ``.vgf`` file pair is missing, truncated or inconsistent."""


class EmptyForegroundError(GridError):
    """A mask has no foreground voxels."""


def _as_triple(values, name: str, cast=float) -> tuple:
    values = tuple(cast(v) for v in values)
    if len(values) != 3:
        raise GridError(f"{name} must have 3 components, got {values}")
    return values


@dataclass(frozen=True)
class VolumeGrid:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GridError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise GridError("volume contains non-finite values")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GridError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelGrid:
    data: np.ndarray
    num_classes: int = 2
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GridError(f"label data must be a non-empty 3D array, got shape {data.shape}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise GridError(f"num_classes must lie in [2, 256], got {self.num_classes}")
        if data.size and (data.min() < 0 or data.max() > self.num_classes - 1):
            raise GridError(
                f"label values must lie in [0, {self.num_classes - 1}], "
                f"got [{data.min()}, {data.max()}]"
            )
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GridError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.uint8))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


Grid = Union[VolumeGrid, LabelGrid]


@dataclass(frozen=True)
class BoundingBox:
    """Voxel-space box; ``lo`` inclusive, ``hi`` exclusive."""

    lo: Shape3
    hi: Shape3

    def __post_init__(self):
        lo = _as_triple(self.lo, "lo", int)
        hi = _as_triple(self.hi, "hi", int)
        if any(l >= h for l, h in zip(lo, hi)):
            raise GridError(f"box must satisfy lo < hi componentwise, got lo={lo} hi={hi}")
        if min(lo) < 0:
            raise GridError(f"box lo must be non-negative, got {lo}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self) -> Shape3:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def fits(self, shape: Sequence[int]) -> bool:
        return all(h <= s for h, s in zip(self.hi, shape))

    @classmethod
    def full(cls, shape: Sequence[int]) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(s) for s in shape))

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_json(cls, obj: dict) -> "BoundingBox":
        return cls(tuple(obj["lo"]), tuple(obj["hi"]))


# ----------------------------------------------------------------------------
# file I/O


def _paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".vgf.json", ".vgf.raw", ".vgf"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    stem = path.with_name(name)
    return stem.with_name(name + ".vgf.json"), stem.with_name(name + ".vgf.raw")


def write_grid(path: Union[str, Path], grid: Grid) -> Path:
    """Write ``grid`` as ``<path>.vgf.json`` + ``<path>.vgf.raw``; returns the header path."""
    header_path, raw_path = _paths(path)
    is_label = isinstance(grid, LabelGrid)
    dtype = LABEL_DTYPE if is_label else VOLUME_DTYPE
    header = {
        "dims": list(grid.shape),
        "dtype": "uint8" if is_label else "float32",
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "num_classes": grid.num_classes if is_label else None,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(grid.data, dtype=dtype).tobytes(order="C"))
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def read_grid(path: Union[str, Path]) -> Grid:
    header_path, raw_path = _paths(path)
    if not header_path.exists() or not raw_path.exists():
        raise GridFormatError(f"missing .vgf pair for {path}")
    try:
        header = json.loads(header_path.read_text())
        dims = tuple(int(d) for d in header["dims"])
        kind = header["dtype"]
    except (KeyError, ValueError, TypeError) as exc:
        raise GridFormatError(f"malformed header {header_path}: {exc}") from exc
    if kind not in ("uint8", "float32"):
        raise GridFormatError(f"unsupported dtype {kind!r} in {header_path}")
    dtype = LABEL_DTYPE if kind == "uint8" else VOLUME_DTYPE
    payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise GridFormatError(
            f"payload size mismatch in {raw_path}: expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    spacing = tuple(header.get("spacing", (1.0, 1.0, 1.0)))
    origin = tuple(header.get("origin", (0.0, 0.0, 0.0)))
    if kind == "uint8":
        num_classes = int(header["num_classes"])
        if data.size and int(data.max()) > num_classes - 1:
            raise GridFormatError(
                f"label value {int(data.max())} exceeds K={num_classes - 1} in {raw_path}"
            )
        return LabelGrid(data, num_classes, spacing, origin)
    if not np.all(np.isfinite(data)):
        raise GridFormatError(f"non-finite intensities in {raw_path}")
    return VolumeGrid(data, spacing, origin)


def volume_io(path, grid: Grid = None, mode: str = "read") -> Grid:
    """Read or write a grid; ``mode`` is ``"read"`` or ``"write"``."""
    if mode == "write":
        if grid is None:
            raise GridError("write mode needs a grid")
        write_grid(path, grid)
        return grid
    if mode == "read":
        return read_grid(path)
    raise GridError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------------
# resampling


def _linear_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    scale = n_in / n_out
    coord = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    coord = np.clip(coord, 0.0, n_in - 1)
    i0 = np.floor(coord).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = coord - i0
    shape = [1] * arr.ndim
    shape[axis] = n_out
    w1 = w1.reshape(shape)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    return a0 * (1.0 - w1) + a1 * w1


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output voxel under half-pixel-centred alignment."""
    idx = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_array(data: np.ndarray, target_shape: Sequence[int], interp: str = "trilinear") -> np.ndarray:
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise GridError(f"target shape must be 3 positive ints, got {target_shape}")
    if interp == "nearest":
        out = data
        for axis, n_out in enumerate(target_shape):
            if out.shape[axis] != n_out:
                out = np.take(out, nearest_indices(out.shape[axis], n_out), axis=axis)
        return np.ascontiguousarray(out)
    if interp == "trilinear":
        out = data.astype(np.float64)
        for axis, n_out in enumerate(target_shape):
            out = _linear_axis(out, axis, n_out)
        return out.astype(data.dtype if data.dtype.kind == "f" else np.float32)
    raise GridError(f"unknown interpolation {interp!r}")


def resample(grid: Grid, target_shape: Sequence[int], interp: str = "trilinear") -> Grid:
    if isinstance(grid, LabelGrid) and interp != "nearest":
        raise GridError("label grids must be resampled with nearest interpolation")
    data = resample_array(grid.data, target_shape, interp)
    spacing = tuple(sp * n / m for sp, n, m in zip(grid.spacing, grid.shape, data.shape))
    if isinstance(grid, LabelGrid):
        return LabelGrid(data, grid.num_classes, spacing, grid.origin)
    return VolumeGrid(data, spacing, grid.origin)


# ----------------------------------------------------------------------------
# boxes, crop and paste


def box_from_mask(mask, margin_frac: float = 0.0) -> BoundingBox:
    """Tight box around the foreground, grown by ``margin_frac`` of its extent per side."""
    data = mask.data if isinstance(mask, (LabelGrid, VolumeGrid)) else np.asarray(mask)
    coords = np.nonzero(data)
    if coords[0].size == 0:
        raise EmptyForegroundError("mask has no foreground voxels")
    lo, hi = [], []
    for axis, c in enumerate(coords):
        a, b = int(c.min()), int(c.max()) + 1
        pad = int(math.ceil(margin_frac * (b - a) - 1e-9)) if margin_frac > 0 else 0
        lo.append(max(0, a - pad))
        hi.append(min(data.shape[axis], b + pad))
    return BoundingBox(tuple(lo), tuple(hi))


def scale_box(box: BoundingBox, from_shape: Sequence[int], to_shape: Sequence[int]) -> BoundingBox:
    """Map a box between two grids covering the same field of view."""
    lo, hi = [], []
    for l, h, n_from, n_to in zip(box.lo, box.hi, from_shape, to_shape):
        s = n_to / n_from
        lo.append(max(0, int(math.floor(l * s + 1e-9))))
        hi.append(min(int(n_to), max(int(math.ceil(h * s - 1e-9)), lo[-1] + 1)))
    return BoundingBox(tuple(lo), tuple(hi))


def crop_resize(grid: Grid, box: BoundingBox, out_shape: Sequence[int]) -> Grid:
    """Crop ``box`` out of ``grid`` and resample it to ``out_shape``.

    Intensity grids use trilinear interpolation, label grids nearest.
    """
    if not box.fits(grid.shape):
        raise GridError(f"box {box} lies outside grid of shape {grid.shape}")
    sub = grid.data[box.slices]
    interp = "nearest" if isinstance(grid, LabelGrid) else "trilinear"
    data = resample_array(sub, out_shape, interp)
    spacing = tuple(sp * n / m for sp, n, m in zip(grid.spacing, box.size, data.shape))
    origin = tuple(o + l * sp for o, l, sp in zip(grid.origin, box.lo, grid.spacing))
    if isinstance(grid, LabelGrid):
        return LabelGrid(data, grid.num_classes, spacing, origin)
    return VolumeGrid(data, spacing, origin)


def paste_back(
    cropped_pred: LabelGrid,
    box: BoundingBox,
    full_shape: Sequence[int],
    spacing: Triple = (1.0, 1.0, 1.0),
    origin: Triple = (0.0, 0.0, 0.0),
) -> LabelGrid:
    """Nearest-resize a cropped prediction back to ``box`` on a zero canvas."""
    full_shape = tuple(int(s) for s in full_shape)
    if not box.fits(full_shape):
        raise GridError(f"box {box} lies outside grid of shape {full_shape}")
    canvas = np.zeros(full_shape, dtype=np.uint8)
    canvas[box.slices] = resample_array(cropped_pred.data, box.size, "nearest")
    return LabelGrid(canvas, cropped_pred.num_classes, spacing, origin)
