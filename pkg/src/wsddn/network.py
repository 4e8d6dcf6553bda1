"""Two-stream region scoring network.

Forward pipeline per image: a small convolutional backbone runs once,
region proposals are max-pooled from the shared feature map on a fixed
g x g grid, two fully connected layers produce per-region features, and
two parallel heads score them. One head softmaxes over classes within
each region ("what is here"), the other softmaxes over regions within
each class ("where is the evidence"). Their elementwise product summed
over regions gives per-class image probabilities in (0, 1), which is
what lets image-level labels train a detector.

A single-stream variant (classification head only, log-sum-exp over
regions) serves as the comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .regions import Region


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    conv_channels: tuple[int, ...] = (16, 32)
    spp_grid: int = 3
    fc_widths: tuple[int, int] = (64, 64)
    num_classes: int = 3
    use_box_score: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.spp_grid < 1 or self.num_classes < 1:
            raise ValueError("in_channels, spp_grid and num_classes must be positive")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be a nonempty tuple of positive widths")
        if len(self.fc_widths) != 2 or any(w < 1 for w in self.fc_widths):
            raise ValueError("fc_widths must be two positive widths")

    @property
    def backbone_stride(self) -> int:
        # each stage is conv(3x3, pad 1) + relu + maxpool 2x2
        return 2 ** len(self.conv_channels)

    @property
    def min_input_side(self) -> int:
        return self.backbone_stride

    @property
    def pooled_width(self) -> int:
        return self.spp_grid * self.spp_grid * self.conv_channels[-1]


@dataclass
class RegionScores:
    """Per-region and per-image outputs of one forward pass.

    class_probs and det_probs are C x |R|; class_probs columns and
    det_probs rows each sum to 1. combined is their elementwise product,
    image is its per-class sum over regions. fc7 (|R| x D) is kept for
    the feature-discrepancy regularizer.
    """

    class_probs: Tensor
    det_probs: Tensor
    combined: Tensor
    image: Tensor
    fc7: Tensor = field(repr=False, default=None)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Parameters:
    """He-scaled random weights, zero biases, small-std scoring heads."""
    params = Parameters()
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.conv_channels, start=1):
        fan_in = 3 * 3 * cin
        params.add(f"conv{i}/w", rng.normal(0.0, np.sqrt(2.0 / fan_in), (3, 3, cin, cout)))
        params.add(f"conv{i}/b", np.zeros(cout))
        cin = cout
    widths = [cfg.pooled_width, cfg.fc_widths[0], cfg.fc_widths[1]]
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:]), start=6):
        params.add(f"fc{i}/w", rng.normal(0.0, np.sqrt(2.0 / w_in), (w_in, w_out)))
        params.add(f"fc{i}/b", np.zeros(w_out))
    for head in ("fc8c", "fc8d"):
        params.add(f"{head}/w", rng.normal(0.0, 0.01, (cfg.fc_widths[1], cfg.num_classes)))
        params.add(f"{head}/b", np.zeros(cfg.num_classes))
    return params


def backbone_forward(image: Tensor, params: Parameters, cfg: ModelConfig) -> tuple[Tensor, int]:
    """Shared feature map for the whole image, plus its cumulative stride.

    Runs once per image regardless of how many regions get pooled later.
    """
    if image.data.ndim != 3 or image.data.shape[2] != cfg.in_channels:
        raise ValueError(f"expected (H, W, {cfg.in_channels}) image, got {image.data.shape}")
    h, w = image.data.shape[:2]
    m = cfg.min_input_side
    if h < m or w < m:
        raise ValueError(f"{h}x{w} image below the backbone minimum of {m}x{m}")
    x = image
    for i in range(1, len(cfg.conv_channels) + 1):
        x = ad.conv2d(x, params[f"conv{i}/w"], params[f"conv{i}/b"], stride=1, pad=1)
        x = ad.relu(x)
        x = ad.maxpool2x2(x)
    return x, cfg.backbone_stride


def _project_spans(vals0: np.ndarray, vals1: np.ndarray, stride: int, limit: int):
    """Map pixel spans [v0, v1) to feature cells: floor/ceil, clamp, >= 1 cell."""
    f0 = np.minimum(vals0 // stride, limit - 1)
    f1 = np.minimum(-(-vals1 // stride), limit)
    f1 = np.maximum(f1, f0 + 1)
    return f0, f1


def _bin_edges(f0: np.ndarray, f1: np.ndarray, g: int):
    """Even split of each span into g bins, earlier bins taking extra cells.

    Spans shorter than g cells leave later bins empty; those are clamped
    to replicate the last occupied cell so every bin pools something.
    """
    length = f1 - f0                                   # (n,)
    base, rem = np.divmod(length, g)
    b = np.arange(g)
    starts = b[None, :] * base[:, None] + np.minimum(b[None, :], rem[:, None])
    sizes = base[:, None] + (b[None, :] < rem[:, None])
    starts = np.minimum(starts, (length - 1)[:, None])
    ends = np.maximum(starts + sizes, starts + 1)
    return f0[:, None] + starts, f0[:, None] + ends


def roi_spp_pool(feature_map: Tensor, regions: list[Region], stride: int, grid: int) -> Tensor:
    """Fixed g x g max pooling of each region from the shared feature map.

    Output row r is laid out bin-row-major, channel fastest: it equals
    cropping region r from the map and adaptively max-pooling the crop to
    g x g. Gradients flow only to each bin's argmax cell (first row-major
    cell on ties).
    """
    if not regions:
        raise ValueError("roi_spp_pool needs at least one region")
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    hf, wf, ch = feature_map.data.shape
    n = len(regions)
    x0 = np.array([r.x0 for r in regions])
    x1 = np.array([r.x1 for r in regions])
    y0 = np.array([r.y0 for r in regions])
    y1 = np.array([r.y1 for r in regions])
    fx0, fx1 = _project_spans(x0, x1, stride, wf)
    fy0, fy1 = _project_spans(y0, y1, stride, hf)
    xs, xe = _bin_edges(fx0, fx1, grid)                # (n, g) cell spans
    ys, ye = _bin_edges(fy0, fy1, grid)

    # padded cell-index table per (region, ybin, xbin): pad positions clamp
    # to the bin's last row/column, so the first occurrence of the maximum
    # in scan order is still the first row-major maximal real cell
    mh = int((ye - ys).max())
    mw = int((xe - xs).max())
    dy = np.arange(mh)
    dx = np.arange(mw)
    rows = ys[:, :, None] + np.minimum(dy[None, None, :], (ye - ys - 1)[:, :, None])
    cols = xs[:, :, None] + np.minimum(dx[None, None, :], (xe - xs - 1)[:, :, None])
    # (n, g, g, mh*mw) flat cell ids, row-major (dy, dx) within the bin
    cells = (rows[:, :, None, :, None] * wf + cols[:, None, :, None, :]).reshape(
        n, grid, grid, mh * mw)

    vals = feature_map.data.reshape(hf * wf, ch)[cells]      # (n, g, g, m, ch)
    best = np.argmax(vals, axis=3)                           # (n, g, g, ch)
    cell_of_best = np.take_along_axis(
        cells[..., None], best[..., None, :], axis=3)[..., 0, :]
    flat = (cell_of_best * ch + np.arange(ch)).reshape(-1)
    return ad.reshape(ad.gather(feature_map, flat), (n, grid * grid * ch))


def box_score_scale(region_features: Tensor, regions: list[Region]) -> Tensor:
    """Multiply each region's feature row by its normalized objectness.

    Scores are rescaled so the best proposal in the list has factor 1;
    the multiplication is a plain differentiable pass-through for the
    features (the scores themselves carry no gradient).
    """
    if any(r.objectness is None for r in regions):
        raise ValueError("box-score scaling requires objectness on every region")
    if region_features.data.shape[0] != len(regions):
        raise ValueError(f"{region_features.data.shape[0]} feature rows "
                         f"for {len(regions)} regions")
    obj = np.array([r.objectness for r in regions])
    peak = obj.max()
    if peak > 0:
        obj = obj / peak
    factors = np.broadcast_to(obj[:, None], region_features.data.shape).copy()
    return ad.mul(region_features, Tensor(factors))


def fc_stack(region_features: Tensor, params: Parameters) -> Tensor:
    """Two linear+relu layers applied row-wise (regions stay independent)."""
    x = ad.relu(ad.add(ad.matmul(region_features, params["fc6/w"]), params["fc6/b"]))
    return ad.relu(ad.add(ad.matmul(x, params["fc7/w"]), params["fc7/b"]))


def classification_stream(fc7: Tensor, params: Parameters) -> Tensor:
    """Class probabilities per region: C x |R|, each column sums to 1."""
    logits = ad.add(ad.matmul(fc7, params["fc8c/w"]), params["fc8c/b"])
    return ad.softmax_axis(ad.transpose2d(logits), axis=0)


def detection_stream(fc7: Tensor, params: Parameters) -> Tensor:
    """Region weighting per class: C x |R|, each row sums to 1."""
    logits = ad.add(ad.matmul(fc7, params["fc8d/w"]), params["fc8d/b"])
    return ad.softmax_axis(ad.transpose2d(logits), axis=1)


def combine_scores(class_probs: Tensor, det_probs: Tensor) -> Tensor:
    """Elementwise product of the two streams; every entry lands in [0, 1]."""
    if class_probs.data.shape != det_probs.data.shape:
        raise ValueError(f"stream shape mismatch: {class_probs.data.shape} "
                         f"vs {det_probs.data.shape}")
    return ad.mul(class_probs, det_probs)


def image_scores(combined: Tensor) -> Tensor:
    """Per-class image probability: sum the combined scores over regions.

    For C >= 2 every value is strictly inside (0, 1). With a single class
    the sum is the constant 1 (the class softmax is identically 1 and the
    region softmax sums to 1), so that degenerate case returns exactly
    [1.0] with no gradient.
    """
    c = combined.data.shape[0]
    if c == 1:
        return Tensor(np.ones(1))
    return ad.tsum(combined, axis=1)


def wsddn_forward(image: Tensor, regions: list[Region], params: Parameters,
                  cfg: ModelConfig) -> RegionScores:
    fmap, stride = backbone_forward(image, params, cfg)
    pooled = roi_spp_pool(fmap, regions, stride, cfg.spp_grid)
    if cfg.use_box_score:
        pooled = box_score_scale(pooled, regions)
    fc7 = fc_stack(pooled, params)
    class_probs = classification_stream(fc7, params)
    det_probs = detection_stream(fc7, params)
    combined = combine_scores(class_probs, det_probs)
    return RegionScores(class_probs, det_probs, combined, image_scores(combined), fc7)


def baseline_forward(fc7: Tensor, params: Parameters) -> Tensor:
    """Single-stream image scores: per class, log-sum-exp over region scores."""
    logits = ad.add(ad.matmul(fc7, params["fc8c/w"]), params["fc8c/b"])
    return ad.logsumexp_axis(ad.transpose2d(logits), axis=1)


@dataclass
class BaselineScores:
    """Single-stream outputs: raw per-region class logits (C x |R|) and
    their per-class log-sum-exp as the image score."""

    combined: Tensor
    image: Tensor


def baseline_scores(image: Tensor, regions: list[Region], params: Parameters,
                    cfg: ModelConfig) -> BaselineScores:
    fmap, stride = backbone_forward(image, params, cfg)
    pooled = roi_spp_pool(fmap, regions, stride, cfg.spp_grid)
    if cfg.use_box_score:
        pooled = box_score_scale(pooled, regions)
    fc7 = fc_stack(pooled, params)
    logits = ad.add(ad.matmul(fc7, params["fc8c/w"]), params["fc8c/b"])
    per_class = ad.transpose2d(logits)
    return BaselineScores(per_class, ad.logsumexp_axis(per_class, axis=1))


def baseline_image_scores(image: Tensor, regions: list[Region], params: Parameters,
                          cfg: ModelConfig) -> Tensor:
    return baseline_scores(image, regions, params, cfg).image
