"""Box and mask primitives: coordinates, areas, IoU, Dice, run-length encoding.

Coordinates are continuous, in pixels, with the origin at the top-left image
corner (x rightward, y downward). Boxes use half-open intervals with the
pixel-center rule: the pixel at integer index (i, j) is covered by a box iff
x_min <= i + 0.5 < x_max and y_min <= j + 0.5 < y_max. This single rule keeps
the analytic IoU and the rasterized IoU in exact agreement for
integer-aligned boxes.

All values are immutable after construction and every operation is a pure
function, so everything here is safe to call from concurrent workers.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError

_BOX_FIELDS = ("x_min", "y_min", "x_max", "y_max")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with strictly positive area, in pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        raw = (self.x_min, self.y_min, self.x_max, self.y_max)
        try:
            coords = tuple(float(c) for c in raw)
        except (TypeError, ValueError) as exc:
            raise GeometryError(f"box coordinates must be numbers, got {raw!r}") from exc
        for name, value in zip(_BOX_FIELDS, coords):
            object.__setattr__(self, name, value)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"box coordinates must be finite, got {coords!r}")
        if min(coords) < 0:
            raise GeometryError(f"box coordinates must be >= 0, got {coords!r}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"box must have strictly positive area, got {coords!r}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class ImageDims:
    """Width and height of an image, in whole pixels."""

    width: int
    height: int

    def __post_init__(self):
        try:
            object.__setattr__(self, "width", operator.index(self.width))
            object.__setattr__(self, "height", operator.index(self.height))
        except TypeError as exc:
            raise GeometryError(
                f"image dims must be integers, got {self.width!r}x{self.height!r}"
            ) from exc
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image dims must be >= 1, got {self.width}x{self.height}")

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def contains_box(self, box: BoundingBox) -> bool:
        return box.x_max <= self.width and box.y_max <= self.height


@dataclass(frozen=True)
class InstanceMask:
    """Binary raster stored as row-major run-length encoding.

    ``runs`` holds alternating background/foreground run lengths in row-major
    scan order. The leading background run may be zero; every later run is
    strictly positive; the runs sum to ``width * height``.
    """

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        try:
            object.__setattr__(self, "width", operator.index(self.width))
            object.__setattr__(self, "height", operator.index(self.height))
            object.__setattr__(self, "runs", tuple(operator.index(r) for r in self.runs))
        except TypeError as exc:
            raise GeometryError(f"mask dims and runs must be integers: {exc}") from exc
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"mask dims must be >= 1, got {self.width}x{self.height}")
        runs = np.asarray(self.runs, dtype=np.int64)
        if runs.size == 0:
            raise GeometryError("mask must have at least one run")
        if runs[0] < 0 or (runs.size > 1 and not (runs[1:] > 0).all()):
            raise GeometryError("runs after the first must be strictly positive")
        total = int(runs.sum())
        if total != self.width * self.height:
            raise GeometryError(
                f"runs sum to {total}, expected {self.width * self.height} "
                f"for a {self.width}x{self.height} mask"
            )

    @classmethod
    def from_array(cls, raster: np.ndarray) -> "InstanceMask":
        """Encode a 2D array (nonzero = foreground) as a row-major RLE mask."""
        arr = np.asarray(raster)
        if arr.ndim != 2:
            raise GeometryError(f"raster must be 2D, got shape {arr.shape}")
        height, width = arr.shape
        flat = arr.astype(bool).ravel(order="C")
        edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], edges, [flat.size]))
        runs = np.diff(bounds)
        if flat[0]:
            runs = np.concatenate(([0], runs))
        return cls(width=width, height=height, runs=tuple(int(r) for r in runs))

    @classmethod
    def empty(cls, dims: ImageDims) -> "InstanceMask":
        return cls(width=dims.width, height=dims.height, runs=(dims.pixel_count,))

    @classmethod
    def full(cls, dims: ImageDims) -> "InstanceMask":
        return cls(width=dims.width, height=dims.height, runs=(0, dims.pixel_count))

    def to_array(self) -> np.ndarray:
        """Decode to a bool array of shape (height, width)."""
        values = np.arange(len(self.runs)) % 2 == 1
        flat = np.repeat(values, np.asarray(self.runs, dtype=np.int64))
        return flat.reshape(self.height, self.width)

    @property
    def dims(self) -> ImageDims:
        return ImageDims(self.width, self.height)

    @property
    def area(self) -> int:
        """Number of foreground pixels."""
        return int(sum(self.runs[1::2]))

    @property
    def is_empty(self) -> bool:
        return self.area == 0


def _require_same_dims(a: InstanceMask, b: InstanceMask, what: str) -> None:
    if a.width != b.width or a.height != b.height:
        raise GeometryError(
            f"{what} requires identical dims, got {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, computed analytically.

    Returns 0.0 for disjoint boxes; symmetric in its arguments.
    """
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = a.area + b.area - intersection
    return intersection / union


def mask_dice(a: InstanceMask, b: InstanceMask) -> float:
    """Dice score 2*|A&B| / (|A|+|B|) over foreground pixels.

    Two empty masks agree perfectly and score 1.0; empty vs nonempty is 0.0.
    """
    _require_same_dims(a, b, "mask_dice")
    area_a = a.area
    area_b = b.area
    if area_a == 0 and area_b == 0:
        return 1.0
    intersection = int(np.count_nonzero(a.to_array() & b.to_array()))
    return 2 * intersection / (area_a + area_b)


def box_to_mask(box: BoundingBox, dims: ImageDims) -> InstanceMask:
    """Rasterize a box by the pixel-center rule.

    A box entirely outside the frame yields an empty mask rather than an
    error.
    """
    x0 = max(0, math.ceil(box.x_min - 0.5))
    x1 = min(dims.width, math.ceil(box.x_max - 0.5))
    y0 = max(0, math.ceil(box.y_min - 0.5))
    y1 = min(dims.height, math.ceil(box.y_max - 0.5))
    raster = np.zeros((dims.height, dims.width), dtype=bool)
    if x1 > x0 and y1 > y0:
        raster[y0:y1, x0:x1] = True
    return InstanceMask.from_array(raster)


def mask_union(masks: Sequence[InstanceMask], dims: Optional[ImageDims] = None) -> InstanceMask:
    """Union of foregrounds. An empty list needs explicit dims for the result."""
    if not masks:
        if dims is None:
            raise GeometryError("mask_union of an empty list needs explicit dims")
        return InstanceMask.empty(dims)
    first = masks[0]
    if dims is not None and (first.width, first.height) != (dims.width, dims.height):
        raise GeometryError(
            f"masks are {first.width}x{first.height} but dims say {dims.width}x{dims.height}"
        )
    acc = first.to_array().copy()
    for m in masks[1:]:
        _require_same_dims(first, m, "mask_union")
        acc |= m.to_array()
    return InstanceMask.from_array(acc)


def mask_intersect(a: InstanceMask, region: InstanceMask) -> InstanceMask:
    """Restrict mask ``a`` to the foreground of ``region``."""
    _require_same_dims(a, region, "mask_intersect")
    return InstanceMask.from_array(a.to_array() & region.to_array())


def mask_bbox(m: InstanceMask) -> Optional[BoundingBox]:
    """Tight integer-edged box around the foreground; None for an empty mask."""
    arr = m.to_array()
    rows = np.flatnonzero(arr.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(arr.any(axis=0))
    return BoundingBox(
        x_min=float(cols[0]),
        y_min=float(rows[0]),
        x_max=float(cols[-1] + 1),
        y_max=float(rows[-1] + 1),
    )
