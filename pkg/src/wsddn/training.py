"""Learning objective and epoch loop.

The classifier trains from image-level labels alone: per image, the
per-class probabilities (sums of two-stream region scores) feed C binary
log-loss terms, L2 weight decay couples in through the optimizer, and an
optional term pulls the fc7 features of regions that strongly overlap
each positive class's best-scoring region toward that region's features,
weighted by the winner's own score.

Every step consumes one image with its full region list as the
minibatch. The learning rate drops tenfold at the halfway epoch. All
randomness (shuffle, flip, scale choice) derives from per-epoch seeded
streams so a run can resume from a checkpoint bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import NumericError, Parameters, SgdMomentum, Tensor
from .dataset import ImageSample
from .images import flip_horizontal_image, resize_bilinear
from .network import ModelConfig
from .regions import Region, flip_horizontal, iou, scale_region

PROB_CLAMP = 1e-12
INIT_STREAM_TAG = 11
EPOCH_STREAM_TAG = 12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr_first: float = 1e-3
    lr_second: float | None = None          # defaults to lr_first / 10
    switch_epoch: int | None = None         # defaults to epochs // 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    reg_weight: float = 0.0
    reg_iou: float = 0.6
    jitter_scales: tuple[int, ...] = (48, 64, 80)
    seed: int = 0

    def __post_init__(self):
        # epochs == 0 is allowed and means "initialize only"
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        # zero rates are allowed as explicit null updates
        if self.lr_first < 0 or (self.lr_second is not None and self.lr_second < 0):
            raise ValueError("learning rates must not be negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.reg_weight < 0:
            raise ValueError("weight_decay and reg_weight must be >= 0")
        if not 0.0 < self.reg_iou < 1.0:
            raise ValueError(f"reg_iou must be in (0, 1), got {self.reg_iou}")
        if not self.jitter_scales or any(s < 4 for s in self.jitter_scales):
            raise ValueError("jitter_scales must be nonempty, all >= 4 px")

    @property
    def lr_late(self) -> float:
        return self.lr_second if self.lr_second is not None else self.lr_first / 10.0

    @property
    def switch_at(self) -> int:
        return self.switch_epoch if self.switch_epoch is not None else self.epochs // 2

    def lr_at(self, epoch: int) -> float:
        return self.lr_first if epoch < self.switch_at else self.lr_late


def validate_labels(labels: np.ndarray, num_classes: int, require_positive: bool = True) -> None:
    labels = np.asarray(labels)
    if labels.shape != (num_classes,):
        raise ValueError(f"label vector shape {labels.shape} != ({num_classes},)")
    if not np.all(np.isin(labels, (-1, 1))):
        raise ValueError(f"labels must be -1/+1, got {labels}")
    if require_positive and not np.any(labels == 1):
        raise ValueError("training image needs at least one positive label")


def binary_log_loss(y_pred: Tensor, labels) -> Tensor:
    """Sum of C binary log-loss terms: -log p for +1 labels, -log(1-p)
    for -1 labels, via the single expression -log(y*(p - 1/2) + 1/2).
    Predictions are clamped away from 0 and 1 first."""
    lab = np.asarray(labels, dtype=np.float64)
    if y_pred.data.shape != lab.shape:
        raise ValueError(f"predictions {y_pred.data.shape} vs labels {lab.shape}")
    p = ad.clamp(y_pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    # y*(p - 1/2) + 1/2  ==  y*p + (1 - y)/2
    inner = ad.add(ad.mul(p, Tensor(lab)), Tensor((1.0 - lab) / 2.0))
    return ad.scale(ad.tsum(ad.log(inner)), -1.0)


def spatial_regularizer(combined: Tensor, fc7: Tensor, regions: list[Region],
                        labels, reg_iou: float = 0.6) -> Tensor:
    """Feature-coherence penalty for one image, already divided by C.

    For each positive class: find the top-scoring region (ties break to
    the lowest index); every other region overlapping it by at least
    ``reg_iou`` contributes half its squared fc7 distance to the winner,
    weighted by the winner's combined score. Both the weight and the
    features stay differentiable. Zero when nothing qualifies.
    """
    lab = np.asarray(labels)
    c, n = combined.data.shape
    if lab.shape != (c,):
        raise ValueError(f"labels {lab.shape} for {c} classes")
    if fc7.data.shape[0] != n or len(regions) != n:
        raise ValueError("combined scores, fc7 rows and regions disagree on |R|")
    terms = []
    for k in np.flatnonzero(lab == 1):
        p = int(np.argmax(combined.data[k]))
        mates = [r for r in range(n)
                 if r != p and iou(regions[r], regions[p]) >= reg_iou]
        if not mates:
            continue
        anchor = ad.gather_rows(fc7, [p] * len(mates))
        others = ad.gather_rows(fc7, mates)
        diff = ad.add(others, ad.scale(anchor, -1.0))
        ssq = ad.tsum(ad.mul(diff, diff))
        weight = ad.gather(combined, [int(k) * n + p])
        terms.append(ad.mul(weight, ad.scale(ssq, 0.5)))
    if not terms:
        return Tensor(np.zeros(1))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / c)


def image_data_loss(sample_image: np.ndarray, regions: list[Region], labels,
                    params: Parameters, model_cfg: ModelConfig,
                    train_cfg: TrainConfig) -> Tensor:
    """Classification loss plus weighted regularizer for a single image
    (the L2 term is the optimizer's job during training)."""
    scores = net.wsddn_forward(Tensor(sample_image), regions, params, model_cfg)
    loss = binary_log_loss(scores.image, labels)
    if train_cfg.reg_weight > 0.0:
        reg = spatial_regularizer(scores.combined, scores.fc7, regions,
                                  labels, train_cfg.reg_iou)
        loss = ad.add(loss, ad.scale(reg, train_cfg.reg_weight))
    return loss


def weight_norm_sq(params: Parameters) -> float:
    return float(sum(np.vdot(p.data, p.data).real for _, p in params.items()))


def l2_energy_term(params: Parameters, weight_decay: float) -> Tensor:
    parts = [ad.tsum(ad.mul(p, p)) for _, p in params.items()]
    total = parts[0]
    for t in parts[1:]:
        total = ad.add(total, t)
    return ad.scale(total, weight_decay / 2.0)


def total_energy(batch: list[ImageSample], params: Parameters,
                 model_cfg: ModelConfig, train_cfg: TrainConfig) -> Tensor:
    """Full training objective over a batch, including the L2 term:
    (wd/2)*||w||^2 + sum of per-image log losses + reg_weight times the
    batch-averaged feature-coherence penalty."""
    if not batch:
        raise ValueError("total_energy needs a nonempty batch")
    loss = l2_energy_term(params, train_cfg.weight_decay)
    reg_terms = []
    for s in batch:
        scores = net.wsddn_forward(Tensor(s.image), s.proposals, params, model_cfg)
        loss = ad.add(loss, binary_log_loss(scores.image, s.labels))
        if train_cfg.reg_weight > 0.0:
            reg_terms.append(spatial_regularizer(
                scores.combined, scores.fc7, s.proposals, s.labels, train_cfg.reg_iou))
    if reg_terms:
        reg = reg_terms[0]
        for t in reg_terms[1:]:
            reg = ad.add(reg, t)
        loss = ad.add(loss, ad.scale(reg, train_cfg.reg_weight / len(batch)))
    return loss


def baseline_loss(image_scores: Tensor, labels) -> Tensor:
    """Per-image hinge on log-sum-exp scores, averaged over classes:
    (1/C) * sum_k max{0, 1 - y_k * s_k}."""
    lab = np.asarray(labels, dtype=np.float64)
    if image_scores.data.shape != lab.shape:
        raise ValueError(f"scores {image_scores.data.shape} vs labels {lab.shape}")
    margins = ad.add_const(ad.scale(ad.mul(image_scores, Tensor(lab)), -1.0), 1.0)
    return ad.scale(ad.tsum(ad.relu(margins)), 1.0 / lab.size)


# ---------------------------------------------------------------------------
# jitter


def jitter(image: np.ndarray, regions: list[Region], rng: np.random.Generator,
           scales: tuple[int, ...], flip_prob: float = 0.5):
    """Random horizontal mirror, then resize so the longest side matches a
    randomly chosen target; regions follow both transforms. Labels are
    untouched by construction. Returns (image, regions)."""
    h, w = image.shape[:2]
    if rng.uniform() < flip_prob:
        image = flip_horizontal_image(image)
        regions = [flip_horizontal(r, w) for r in regions]
    target = int(scales[rng.integers(len(scales))])
    longest = max(h, w)
    if target != longest:
        nh = max(4, int(round(h * target / longest)))
        nw = max(4, int(round(w * target / longest)))
        image = resize_bilinear(image, nh, nw)
        fx, fy = nw / w, nh / h
        moved = []
        for r in regions:
            s = scale_region(r, fx, fy)
            moved.append(Region(min(s.x0, nw - 1), min(s.y0, nh - 1),
                                min(s.x1, nw), min(s.y1, nh), s.objectness))
        regions = moved
    return image, regions


# ---------------------------------------------------------------------------
# the loop


def validate_training_set(samples: list[ImageSample], num_classes: int) -> None:
    if not samples:
        raise ValueError("empty training set")
    for s in samples:
        if not s.proposals:
            raise ValueError(f"{s.image_id}: no region proposals")
        validate_labels(s.labels, num_classes, require_positive=True)


def train(samples: list[ImageSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
          variant: str = "wsddn", params: Parameters | None = None,
          velocity: dict[str, np.ndarray] | None = None, start_epoch: int = 0,
          log=None) -> tuple[Parameters, list[str], dict[str, np.ndarray]]:
    """Run the epoch loop; returns (params, loss log lines, velocity).

    Fresh runs initialize from the seed; passing ``params``/``velocity``/
    ``start_epoch`` resumes a checkpointed run on the exact rng schedule
    the uninterrupted run would have used, so both finish bit-identical.
    """
    if variant not in ("wsddn", "baseline"):
        raise ValueError(f"unknown variant {variant!r}")
    validate_training_set(samples, model_cfg.num_classes)
    if params is None:
        params = net.init_params(
            model_cfg, np.random.default_rng([train_cfg.seed, INIT_STREAM_TAG]))
    opt = SgdMomentum(params, train_cfg.momentum, train_cfg.weight_decay)
    if velocity is not None:
        opt.load_velocity(velocity)
    log_lines: list[str] = []
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, EPOCH_STREAM_TAG, epoch])
        order = rng.permutation(len(samples))
        lr = train_cfg.lr_at(epoch)
        epoch_loss = 0.0
        started = time.monotonic()
        for idx in order:
            s = samples[int(idx)]
            image, regions = jitter(s.image, s.proposals, rng, train_cfg.jitter_scales)
            if variant == "wsddn":
                loss = image_data_loss(image, regions, s.labels, params,
                                       model_cfg, train_cfg)
            else:
                scores = net.baseline_image_scores(Tensor(image), regions,
                                                   params, model_cfg)
                loss = baseline_loss(scores, s.labels)
            value = loss.item() + 0.5 * train_cfg.weight_decay * weight_norm_sq(params)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss on image {s.image_id} "
                                   f"(epoch {epoch})")
            params.zero_grad()
            ad.Graph(params).backward(loss)
            opt.step(lr)
            epoch_loss += value
        line = f"epoch {epoch} loss {epoch_loss / len(samples):.6f} lr {lr:g}"
        log_lines.append(line)
        if log is not None:
            log(f"{line} ({time.monotonic() - started:.1f}s)")
    return params, log_lines, opt.velocity_state()
