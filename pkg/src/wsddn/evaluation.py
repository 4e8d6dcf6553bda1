"""Detection post-processing and metrics.

Covers greedy non-maximum suppression, 11-point interpolated average
precision at IoU 0.5, correct-localization rate (fraction of positive
images whose single most confident box overlaps some true instance),
score averaging across flipped/rescaled views of an image, and across
model checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParseError, Tensor
from .images import flip_horizontal_image, resize_bilinear
from .regions import Region, flip_horizontal, iou, scale_region

NMS_IOU = 0.4
MATCH_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    class_index: int
    region: Region
    score: float

    def __post_init__(self):
        if self.class_index < 0:
            raise ValueError(f"negative class index {self.class_index}")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


# ground truth for one image: list of (class_index, region) pairs
GroundTruth = list[tuple[int, Region]]


def nms(dets: list[Detection], threshold: float = NMS_IOU) -> list[Detection]:
    """Greedy suppression: walk boxes by descending score (ties keep input
    order), keep each box that overlaps no kept box by more than the
    threshold. Output stays score-sorted."""
    if not dets:
        return []
    classes = {d.class_index for d in dets}
    if len(classes) != 1:
        raise ValueError(f"nms expects a single class, got {sorted(classes)}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        if all(iou(dets[i].region, k.region) <= threshold for k in kept):
            kept.append(dets[i])
    return kept


def average_precision(dets: list[tuple[str, Detection]],
                      gt: dict[str, list[Region]],
                      iou_threshold: float = MATCH_IOU) -> float | None:
    """VOC-2007 11-point AP for one class over a pooled test split.

    ``dets`` holds (image id, detection) pairs; ``gt`` maps image id to
    this class's true boxes. Walking detections by rank, each one matches
    the best-overlap still-unmatched true box of its image; IoU at or
    above the threshold makes it a true positive, anything else (including
    a duplicate hit on an already-matched box) a false positive.

    Returns None when the class has no true boxes anywhere (AP undefined).
    """
    total_gt = sum(len(boxes) for boxes in gt.values())
    if total_gt == 0:
        return None
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    matched: dict[str, list[bool]] = {img: [False] * len(b) for img, b in gt.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, det = dets[i]
        boxes = gt.get(image_id, [])
        best, best_j = 0.0, -1
        for j, box in enumerate(boxes):
            if matched[image_id][j]:
                continue
            overlap = iou(det.region, box)
            if overlap > best:
                best, best_j = overlap, j
        if best >= iou_threshold and best_j >= 0:
            tp[rank] = 1.0
            matched[image_id][best_j] = True
        else:
            fp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    points = []
    for t in np.arange(11) / 10.0:
        reached = precision[recall >= t - 1e-12]
        points.append(reached.max() if reached.size else 0.0)
    return float(sum(points) / 11.0)


def corloc(per_image_top: dict[str, Detection],
           gt: dict[str, list[Region]],
           iou_threshold: float = MATCH_IOU) -> float | None:
    """Percentage of positive images whose most confident detection hits
    some true instance at the IoU threshold. None when the class never
    appears."""
    positives = [img for img, boxes in gt.items() if boxes]
    if not positives:
        return None
    hits = 0
    for img in positives:
        det = per_image_top.get(img)
        if det is not None and any(iou(det.region, b) >= iou_threshold
                                   for b in gt[img]):
            hits += 1
    return 100.0 * hits / len(positives)


# ---------------------------------------------------------------------------
# view and ensemble averaging


@dataclass(frozen=True)
class View:
    """One test-time rendering of an image: optional mirror, then resize
    by a scale factor. The identity view is View(False, 1.0)."""

    flip: bool = False
    scale: float = 1.0


def transform_view(image: np.ndarray, regions: list[Region], view: View):
    h, w = image.shape[:2]
    img = image
    regs = regions
    if view.flip:
        img = flip_horizontal_image(img)
        regs = [flip_horizontal(r, w) for r in regs]
    if view.scale != 1.0:
        nh = max(1, int(round(h * view.scale)))
        nw = max(1, int(round(w * view.scale)))
        img = resize_bilinear(img, nh, nw)
        fy, fx = nh / h, nw / w
        clipped = []
        for r in regs:
            s = scale_region(r, fx, fy)
            clipped.append(Region(min(s.x0, nw - 1), min(s.y0, nh - 1),
                                  min(s.x1, nw), min(s.y1, nh), s.objectness))
        regs = clipped
    return img, regs


def multi_view_scores(forward, image: np.ndarray, regions: list[Region],
                      views: list[View]) -> tuple[np.ndarray, np.ndarray]:
    """Average region scores and image scores over views.

    ``forward(image, regions)`` must return objects with ``combined`` and
    ``image`` tensors (region order preserved), so per-view outputs align
    row for row with the untransformed proposal list.
    """
    if not views:
        raise ValueError("at least one view required")
    combined_sum = None
    image_sum = None
    for view in views:
        img, regs = transform_view(image, regions, view)
        out = forward(img, regs)
        c = out.combined.data if isinstance(out.combined, Tensor) else np.asarray(out.combined)
        y = out.image.data if isinstance(out.image, Tensor) else np.asarray(out.image)
        combined_sum = c.copy() if combined_sum is None else combined_sum + c
        image_sum = y.copy() if image_sum is None else image_sum + y
    return combined_sum / len(views), image_sum / len(views)


def ensemble_average(score_sets: list[np.ndarray]) -> np.ndarray:
    """Plain arithmetic mean of aligned score arrays from several models."""
    if not score_sets:
        raise ValueError("ensemble of zero score sets")
    first = np.asarray(score_sets[0], dtype=np.float64)
    total = first.copy()
    for s in score_sets[1:]:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != first.shape:
            raise ValueError(f"score shape mismatch: {s.shape} vs {first.shape}")
        total += s
    return total / len(score_sets)


# ---------------------------------------------------------------------------
# detections file and metrics report


def write_detections(path, dets: list[tuple[str, Detection]]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for image_id, d in dets:
            r = d.region
            fh.write(f"{image_id} {d.class_index} {d.score!r} "
                     f"{r.x0} {r.y0} {r.x1} {r.y1}\n")


def read_detections(path) -> list[tuple[str, Detection]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    out: list[tuple[str, Detection]] = []
    offset = 0
    for raw in blob.splitlines(keepends=True):
        line = raw.decode("ascii", errors="replace").strip()
        if line:
            parts = line.split()
            if len(parts) != 7:
                raise ParseError(path, offset, f"expected 7 fields, got {len(parts)}")
            try:
                region = Region(int(parts[3]), int(parts[4]), int(parts[5]), int(parts[6]))
                out.append((parts[0], Detection(int(parts[1]), region, float(parts[2]))))
            except ValueError as exc:
                raise ParseError(path, offset, str(exc)) from None
        offset += len(raw)
    return out


def format_report(ap_per_class: list[float | None],
                  corloc_per_class: list[float | None],
                  class_names: list[str] | None = None) -> str:
    """Plain-text metrics table; AP and CorLoc as percentages, 4 decimals.

    Classes with undefined metrics print "undefined" and are left out of
    the means.
    """
    c = len(ap_per_class)
    names = class_names or [f"class{i}" for i in range(c)]
    lines = []
    for i in range(c):
        ap = "undefined" if ap_per_class[i] is None else f"{100.0 * ap_per_class[i]:.4f}"
        cl = "undefined" if corloc_per_class[i] is None else f"{corloc_per_class[i]:.4f}"
        lines.append(f"{names[i]:<12} ap {ap:>10} corloc {cl:>10}")
    defined_ap = [a for a in ap_per_class if a is not None]
    defined_cl = [x for x in corloc_per_class if x is not None]
    map_text = f"{100.0 * sum(defined_ap) / len(defined_ap):.4f}" if defined_ap else "undefined"
    cor_text = f"{sum(defined_cl) / len(defined_cl):.4f}" if defined_cl else "undefined"
    lines.append(f"{'mean':<12} ap {map_text:>10} corloc {cor_text:>10}")
    return "\n".join(lines) + "\n"
