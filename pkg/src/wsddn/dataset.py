"""Synthetic grayscale shape scenes with image-level labels.

Each 64x64 image gets a noisy background and one to three filled shapes
(disk, square, triangle) drawn in class-specific intensity bands. The
learner sees only the image, its proposal boxes, and a {-1, +1} label
per class; tight boxes around the shapes are written to a separate file
that only the evaluation path reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParseError, load_tensors, save_tensors
from .proposals import (
    ProposalConfig,
    attach_objectness,
    grid_proposals,
    read_proposals,
    write_proposals,
)
from .regions import Region, iou

# rng stream tags keep the sample, init, and epoch streams independent
SAMPLE_STREAM_TAG = 101


@dataclass(frozen=True)
class DatasetConfig:
    width: int = 64
    height: int = 64
    class_names: tuple[str, ...] = ("disk", "square", "triangle")
    instances_range: tuple[int, int] = (1, 3)
    noise_amplitude: float = 0.25
    intensity_bands: tuple[tuple[float, float], ...] = (
        (0.55, 0.70), (0.70, 0.85), (0.85, 1.00))
    size_range: tuple[int, int] = (14, 26)
    border_margin: int = 2
    contrast: float = 0.15
    max_overlap: float = 0.3
    train_count: int = 500
    test_count: int = 100
    seed: int = 0

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValueError("at least two classes required")
        if len(self.intensity_bands) != len(self.class_names):
            raise ValueError("one intensity band per class required")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("split counts must be >= 1")
        if self.instances_range[0] < 1 or self.instances_range[0] > self.instances_range[1]:
            raise ValueError(f"bad instances_range {self.instances_range}")
        if self.size_range[0] < 3 or self.size_range[0] > self.size_range[1]:
            raise ValueError(f"bad size_range {self.size_range}")
        if self.border_margin < 1:
            raise ValueError("border margin must be >= 1 px")
        known = {"disk", "square", "triangle"}
        if not set(self.class_names) <= known:
            raise ValueError(f"unknown shape classes {set(self.class_names) - known}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class ImageSample:
    image_id: str
    image: np.ndarray                       # (H, W, 1) intensities in [0, 1]
    labels: np.ndarray                      # (C,) of -1 / +1
    proposals: list[Region]
    gt: list[tuple[int, Region]] = field(repr=False, default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError(f"labels must be -1/+1, got {self.labels}")

    def validate_against_gt(self) -> None:
        """Check the +1 classes are exactly the classes present in gt."""
        present = {cls for cls, _ in self.gt}
        derived = np.where(np.isin(np.arange(self.labels.size), sorted(present)), 1, -1)
        if not np.array_equal(self.labels, derived):
            raise ValueError(f"{self.image_id}: labels {self.labels.tolist()} "
                             f"inconsistent with gt classes {sorted(present)}")

    def __eq__(self, other):
        return (isinstance(other, ImageSample)
                and self.image_id == other.image_id
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.labels, other.labels)
                and self.proposals == other.proposals
                and self.gt == other.gt)


# ---------------------------------------------------------------------------
# drawing


def _disk_mask(h, w, cy, cx, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _square_mask(h, w, y0, x0, size):
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y0 + size, x0:x0 + size] = True
    return mask


def _triangle_mask(h, w, y0, x0, size):
    # apex at the top midpoint, base along the bottom edge of the box
    yy, xx = np.mgrid[0:h, 0:w]
    cx = x0 + (size - 1) / 2.0
    t = yy - y0
    inside_rows = (t >= 0) & (t < size)
    halfwidth = (t + 1) * (size - 1) / (2.0 * size)
    return inside_rows & (np.abs(xx - cx) <= halfwidth)


_SHAPE_PAINTERS = {
    "disk": lambda h, w, y0, x0, size: _disk_mask(
        h, w, y0 + (size - 1) / 2.0, x0 + (size - 1) / 2.0, (size - 1) / 2.0),
    "square": _square_mask,
    "triangle": _triangle_mask,
}


def _ring_mask(mask: np.ndarray, thickness: int) -> np.ndarray:
    """The shape's border band: pixels whose (2t+1)-square neighborhood
    leaves the mask. Painting only the ring keeps a box's interior looking
    like background, so a candidate box buried inside a large shape carries
    no evidence and the border itself is what a detector must latch onto.
    """
    core = mask.copy()
    for dy in range(-thickness, thickness + 1):
        for dx in range(-thickness, thickness + 1):
            core &= np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
    return mask & ~core


def _tight_box(mask: np.ndarray) -> Region:
    ys, xs = np.nonzero(mask)
    return Region(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def generate_sample(rng: np.random.Generator, cfg: DatasetConfig,
                    image_id: str = "sample") -> ImageSample:
    """One scene: noise background, 1-3 non-crowding shapes, tight boxes.

    Pure function of the generator state and config. Placement retries a
    bounded number of times per instance, shrinking the shape when space
    runs out; at least the first instance always lands.
    """
    h, w, m = cfg.height, cfg.width, cfg.border_margin
    image = rng.uniform(0.0, cfg.noise_amplitude, size=(h, w, 1))
    occupied = np.zeros((h, w), dtype=bool)
    gt: list[tuple[int, Region]] = []
    count = int(rng.integers(cfg.instances_range[0], cfg.instances_range[1] + 1))
    for _ in range(count):
        cls = int(rng.integers(cfg.num_classes))
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        placed = False
        for _ in range(5):                      # shrink rounds
            for _ in range(40):                 # placement tries at this size
                if w - m - size < m or h - m - size < m:
                    break
                x0 = int(rng.integers(m, w - m - size + 1))
                y0 = int(rng.integers(m, h - m - size + 1))
                painter = _SHAPE_PAINTERS[cfg.class_names[cls]]
                mask = painter(h, w, y0, x0, size)
                if not mask.any():
                    continue
                box = _tight_box(mask)
                if (box.x0 < m or box.y0 < m or box.x1 > w - m or box.y1 > h - m):
                    continue
                if any(iou(box, prev) > cfg.max_overlap for _, prev in gt):
                    continue
                lo, hi = cfg.intensity_bands[cls]
                ring = _ring_mask(mask, max(2, size // 6))
                image[ring, 0] = rng.uniform(lo, hi)
                occupied |= ring
                gt.append((cls, box))
                placed = True
                break
            if placed:
                break
            size = max(cfg.size_range[0] // 2 + 2, int(size * 0.8))
        # an unplaceable instance beyond the first is simply skipped
    if not gt:
        raise RuntimeError(f"could not place any shape in {image_id}")
    labels = np.full(cfg.num_classes, -1, dtype=np.int64)
    for cls, _ in gt:
        labels[cls] = 1
    _assert_contrast(image, [b for _, b in gt], occupied, cfg.contrast, image_id)
    sample = ImageSample(image_id, image, labels, proposals=[], gt=gt)
    sample.validate_against_gt()
    return sample


def _assert_contrast(image, boxes, occupied, contrast, image_id):
    background = image[:, :, 0][~occupied]
    bg_mean = background.mean() if background.size else 0.0
    for box in boxes:
        box_mean = image[box.y0:box.y1, box.x0:box.x1, 0].mean()
        gap = box_mean - bg_mean
        if gap < contrast:
            raise ValueError(f"{image_id}: box {box} mean gap {gap:.3f} "
                             f"below required contrast {contrast}")


def generate_dataset(cfg: DatasetConfig, proposal_cfg: ProposalConfig
                     ) -> dict[str, list[ImageSample]]:
    """Train and test splits with proposals and objectness attached.

    Every sample draws from its own generator seeded by (dataset seed,
    stream tag, split index, sample index), so generation order cannot
    leak state between samples.
    """
    # the window grid depends only on the image dimensions, shared by all
    boxes = grid_proposals(cfg.width, cfg.height, proposal_cfg)
    splits: dict[str, list[ImageSample]] = {}
    for split_idx, (split, count) in enumerate(
            [("train", cfg.train_count), ("test", cfg.test_count)]):
        samples = []
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, SAMPLE_STREAM_TAG, split_idx, i])
            sample = generate_sample(rng, cfg, image_id=f"{split}{i:05d}")
            sample.proposals = attach_objectness(sample.image, boxes)
            samples.append(sample)
        splits[split] = samples
    return splits


# ---------------------------------------------------------------------------
# on-disk layout
#
#   manifest.json                    ids, labels, class names, per split
#   images/<id>.wten                 tensor container, single "image" entry
#   proposals/<id>.txt               "x0 y0 x1 y1 objectness" lines
#   gt/<id>.txt                      "classIndex x0 y0 x1 y1" lines

MANIFEST_NAME = "manifest.json"


def write_dataset(directory, splits: dict[str, list[ImageSample]],
                  class_names: tuple[str, ...]) -> None:
    root = Path(directory)
    for sub in ("images", "proposals", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "classes": list(class_names),
        "splits": {split: [s.image_id for s in samples]
                   for split, samples in splits.items()},
        "labels": {s.image_id: s.labels.tolist()
                   for samples in splits.values() for s in samples},
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (root / MANIFEST_NAME).write_text(text + "\n", encoding="ascii")
    for samples in splits.values():
        for s in samples:
            save_tensors(root / "images" / f"{s.image_id}.wten", {"image": s.image})
            write_proposals(root / "proposals" / f"{s.image_id}.txt", s.proposals)
            write_gt(root / "gt" / f"{s.image_id}.txt", s.gt)


def write_gt(path, gt: list[tuple[int, Region]]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for cls, r in gt:
            fh.write(f"{cls} {r.x0} {r.y0} {r.x1} {r.y1}\n")


def read_gt(path) -> list[tuple[int, Region]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    out: list[tuple[int, Region]] = []
    offset = 0
    for raw in blob.splitlines(keepends=True):
        line = raw.decode("ascii", errors="replace").strip()
        if line:
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(path, offset, f"expected 5 fields, got {len(parts)}")
            try:
                out.append((int(parts[0]), Region(*map(int, parts[1:]))))
            except ValueError as exc:
                raise ParseError(path, offset, str(exc)) from None
        offset += len(raw)
    return out


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(path, 0, "manifest missing") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, exc.msg) from None
    for key in ("format_version", "classes", "splits", "labels"):
        if key not in manifest:
            raise ParseError(path, 0, f"manifest missing key {key!r}")
    if manifest["format_version"] != 1:
        raise ParseError(path, 0, f"unsupported manifest version "
                                  f"{manifest['format_version']}")
    return manifest


def read_dataset(directory, with_gt: bool = True
                 ) -> tuple[dict[str, list[ImageSample]], tuple[str, ...]]:
    """Load every split. ``with_gt=False`` skips the box files entirely,
    which is how the training path guarantees it never sees a box."""
    root = Path(directory)
    manifest = read_manifest(root)
    class_names = tuple(manifest["classes"])
    splits: dict[str, list[ImageSample]] = {}
    for split, ids in manifest["splits"].items():
        samples = []
        for image_id in ids:
            named = load_tensors(root / "images" / f"{image_id}.wten")
            if "image" not in named:
                raise ParseError(root / "images" / f"{image_id}.wten", 0,
                                 "missing 'image' tensor")
            labels = manifest["labels"].get(image_id)
            if labels is None:
                raise ParseError(root / MANIFEST_NAME, 0,
                                 f"no labels for image {image_id!r}")
            props = read_proposals(root / "proposals" / f"{image_id}.txt")
            gt = read_gt(root / "gt" / f"{image_id}.txt") if with_gt else []
            sample = ImageSample(image_id, named["image"],
                                 np.asarray(labels, dtype=np.int64), props, gt)
            if with_gt:
                sample.validate_against_gt()
            samples.append(sample)
        splits[split] = samples
    return splits, class_names
