"""Axis-aligned pixel regions with half-open bounds, plus box geometry."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Region:
    """Box [x0, x1) x [y0, y1) in pixel coordinates, optional objectness."""

    x0: int
    y0: int
    x1: int
    y1: int
    objectness: float | None = None

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate region ({self.x0},{self.y0},{self.x1},{self.y1})")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"negative region origin ({self.x0},{self.y0})")
        if self.objectness is not None and self.objectness < 0:
            raise ValueError(f"negative objectness {self.objectness}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def inside(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def require_inside(self, width: int, height: int) -> None:
        if not self.inside(width, height):
            raise ValueError(f"region ({self.x0},{self.y0},{self.x1},{self.y1}) "
                             f"exceeds {width}x{height} image")

    def with_objectness(self, score: float) -> "Region":
        return replace(self, objectness=float(score))


def iou(a: Region, b: Region) -> float:
    """Intersection area over union area; half-open boxes, in [0, 1]."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def region_array(regions: list[Region]) -> np.ndarray:
    """(n, 4) int64 array of x0, y0, x1, y1 rows."""
    out = np.empty((len(regions), 4), dtype=np.int64)
    for i, r in enumerate(regions):
        out[i] = (r.x0, r.y0, r.x1, r.y1)
    return out


def iou_matrix(a: list[Region], b: list[Region]) -> np.ndarray:
    """All-pairs IoU, shape (len(a), len(b)). Same arithmetic as iou()."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    ba = region_array(a).astype(np.float64)
    bb = region_array(b).astype(np.float64)
    iw = (np.minimum(ba[:, None, 2], bb[None, :, 2])
          - np.maximum(ba[:, None, 0], bb[None, :, 0]))
    ih = (np.minimum(ba[:, None, 3], bb[None, :, 3])
          - np.maximum(ba[:, None, 1], bb[None, :, 1]))
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (ba[:, 2] - ba[:, 0]) * (ba[:, 3] - ba[:, 1])
    area_b = (bb[:, 2] - bb[:, 0]) * (bb[:, 3] - bb[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def flip_horizontal(r: Region, width: int) -> Region:
    """Mirror across the vertical image midline: x' = width - x."""
    r.require_inside(width, r.y1)
    return Region(width - r.x1, r.y0, width - r.x0, r.y1, r.objectness)


def scale_region(r: Region, fx: float, fy: float) -> Region:
    """Rescale coordinates by (fx, fy), rounding outward to keep area >= 1."""
    x0 = int(round(r.x0 * fx))
    y0 = int(round(r.y0 * fy))
    x1 = max(x0 + 1, int(round(r.x1 * fx)))
    y1 = max(y0 + 1, int(round(r.y1 * fy)))
    return Region(x0, y0, x1, y1, r.objectness)
