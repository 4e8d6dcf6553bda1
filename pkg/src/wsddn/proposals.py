"""Deterministic sliding-window region proposals with an edge objectness proxy.

Candidate boxes come from a fixed grid of windows (a few scales and aspect
ratios slid at a fraction of the window size), deduplicated by IoU. Each
proposal can carry an objectness score derived from edge density inside
the box, normalized so the strongest box in an image scores 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParseError
from .regions import Region, iou_matrix


@dataclass(frozen=True)
class ProposalConfig:
    scales: tuple[float, ...] = (0.22, 0.32, 0.45)
    ratios: tuple[float, ...] = (1.0, 0.6, 1.6667)
    stride_fraction: float = 0.34
    max_proposals: int = 400
    dedupe_iou: float = 0.95

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be nonempty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("scales and ratios must be positive")
        if not 0.0 < self.stride_fraction <= 1.0:
            raise ValueError(f"stride_fraction must be in (0, 1], got {self.stride_fraction}")
        if self.max_proposals < 1:
            raise ValueError(f"max_proposals must be >= 1, got {self.max_proposals}")
        if not 0.0 < self.dedupe_iou <= 1.0:
            raise ValueError(f"dedupe_iou must be in (0, 1], got {self.dedupe_iou}")


def _window_extent(width: int, height: int, scale: float, ratio: float) -> tuple[int, int]:
    # scale is a fraction of the short image side; ratio is window w/h
    base = scale * min(width, height)
    w = max(1, int(round(base * math.sqrt(ratio))))
    h = max(1, int(round(base / math.sqrt(ratio))))
    return w, h


def grid_proposals(width: int, height: int, cfg: ProposalConfig) -> list[Region]:
    """All grid windows fully inside the image, scale-major then row-major.

    Windows larger than the image in either dimension are skipped for that
    (scale, ratio) pair; if every pair is skipped the image is unusable.
    """
    out: list[Region] = []
    for scale in cfg.scales:
        for ratio in cfg.ratios:
            w, h = _window_extent(width, height, scale, ratio)
            if w > width or h > height:
                continue
            sx = max(1, int(round(cfg.stride_fraction * w)))
            sy = max(1, int(round(cfg.stride_fraction * h)))
            for y0 in range(0, height - h + 1, sy):
                for x0 in range(0, width - w + 1, sx):
                    out.append(Region(x0, y0, x0 + w, y0 + h))
    if not out:
        raise ValueError(f"{width}x{height} image is smaller than every "
                         f"configured proposal window")
    out = dedupe_proposals(out, cfg.dedupe_iou)
    return out[: cfg.max_proposals]


def dedupe_proposals(regions: list[Region], iou_threshold: float) -> list[Region]:
    """Greedy order-preserving pass dropping near-duplicates of kept boxes."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if not regions:
        return []
    overlaps = iou_matrix(regions, regions)
    kept_idx: list[int] = []
    for i in range(len(regions)):
        if not kept_idx or overlaps[i, kept_idx].max() <= iou_threshold:
            kept_idx.append(i)
    return [regions[i] for i in kept_idx]


def edge_density_objectness(image: np.ndarray, regions: list[Region]) -> np.ndarray:
    """Mean gradient magnitude per region, scaled so the strongest box is 1.

    Central differences on the intensity channel; a constant image scores 0
    for every box. Adding a constant to all pixels changes nothing. Scores
    are computed for the region list as a whole because the normalizer is
    the maximum regional mean over that list.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError(f"expected a single intensity channel, got {img.shape[2]}")
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D intensity image, got rank {img.ndim}")
    h, w = img.shape
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    # summed-area table makes each region query O(1)
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = mag.cumsum(axis=0).cumsum(axis=1)
    means = np.empty(len(regions))
    for i, r in enumerate(regions):
        r.require_inside(w, h)
        total = (integral[r.y1, r.x1] - integral[r.y0, r.x1]
                 - integral[r.y1, r.x0] + integral[r.y0, r.x0])
        means[i] = total / r.area
    peak = means.max() if len(regions) else 0.0
    if peak <= 0.0:
        return np.zeros(len(regions))
    return np.clip(means / peak, 0.0, 1.0)


def attach_objectness(image: np.ndarray, regions: list[Region]) -> list[Region]:
    scores = edge_density_objectness(image, regions)
    return [r.with_objectness(s) for r, s in zip(regions, scores)]


# per-image proposals persist as plain text, one box per line:
#   x0 y0 x1 y1 objectness


def write_proposals(path, regions: list[Region]) -> None:
    lines = []
    for r in regions:
        if r.objectness is None:
            raise ValueError("cannot export a proposal without an objectness score")
        lines.append(f"{r.x0} {r.y0} {r.x1} {r.y1} {r.objectness!r}\n")
    with open(path, "w", encoding="ascii") as fh:
        fh.writelines(lines)


def read_proposals(path) -> list[Region]:
    with open(path, "rb") as fh:
        blob = fh.read()
    regions: list[Region] = []
    offset = 0
    for raw in blob.splitlines(keepends=True):
        line = raw.decode("ascii", errors="replace").strip()
        if line:
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(path, offset, f"expected 5 fields, got {len(parts)}")
            try:
                coords = [int(p) for p in parts[:4]]
                score = float(parts[4])
                regions.append(Region(*coords, objectness=score))
            except ValueError as exc:
                raise ParseError(path, offset, str(exc)) from None
        offset += len(raw)
    return regions
