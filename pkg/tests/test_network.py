import numpy as np
import pytest

from wsddn import autodiff as ad
from wsddn import network as net
from wsddn.autodiff import Tensor, backward, finite_difference_gradient
from wsddn.network import ModelConfig
from wsddn.regions import Region

TINY = ModelConfig(conv_channels=(4, 8), spp_grid=2, fc_widths=(16, 16), num_classes=2)


def make_params(cfg, seed=0):
    return net.init_params(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# backbone


def test_backbone_default_geometry():
    cfg = ModelConfig()
    params = make_params(cfg)
    fmap, stride = net.backbone_forward(Tensor(np.zeros((64, 64, 1))), params, cfg)
    assert fmap.data.shape == (16, 16, cfg.conv_channels[-1])
    assert stride == 4


def test_backbone_zero_image_zero_biases_gives_zero_map():
    cfg = TINY
    params = make_params(cfg, seed=3)
    fmap, _ = net.backbone_forward(Tensor(np.zeros((16, 16, 1))), params, cfg)
    np.testing.assert_array_equal(fmap.data, 0.0)


def test_backbone_deterministic():
    cfg = TINY
    params = make_params(cfg, seed=4)
    img = np.random.default_rng(5).uniform(size=(24, 24, 1))
    a, _ = net.backbone_forward(Tensor(img.copy()), params, cfg)
    b, _ = net.backbone_forward(Tensor(img.copy()), params, cfg)
    assert np.array_equal(a.data, b.data)


def test_backbone_rejects_small_image_naming_minimum():
    cfg = ModelConfig()
    with pytest.raises(ValueError, match="4x4"):
        net.backbone_forward(Tensor(np.zeros((3, 8, 1))), make_params(cfg), cfg)


def test_backbone_rejects_wrong_channels():
    cfg = ModelConfig()
    with pytest.raises(ValueError):
        net.backbone_forward(Tensor(np.zeros((16, 16, 3))), make_params(cfg), cfg)


# ---------------------------------------------------------------------------
# region pooling


def oracle_crop_pool(fmap, region, stride, g):
    """Independent loop implementation: project, crop, adaptive max pool."""
    hf, wf, ch = fmap.shape

    def spans(v0, v1, limit):
        f0 = min(v0 // stride, limit - 1)
        f1 = min(-(-v1 // stride), limit)
        return f0, max(f1, f0 + 1)

    fy0, fy1 = spans(region.y0, region.y1, hf)
    fx0, fx1 = spans(region.x0, region.x1, wf)
    crop = fmap[fy0:fy1, fx0:fx1, :]

    def bins(length):
        base, rem = divmod(length, g)
        sizes = [base + 1] * rem + [base] * (g - rem)
        edges = []
        start = 0
        for s in sizes:
            a = min(start, length - 1)
            edges.append((a, max(start + s, a + 1)))
            start += s
        return edges

    out = np.zeros((g, g, ch))
    for i, (ya, yb) in enumerate(bins(crop.shape[0])):
        for j, (xa, xb) in enumerate(bins(crop.shape[1])):
            out[i, j] = crop[ya:yb, xa:xb, :].max(axis=(0, 1))
    return out.reshape(g * g * ch)


def test_spp_whole_image_grid1_is_global_max():
    rng = np.random.default_rng(8)
    fmap = Tensor(rng.normal(size=(6, 6, 3)))
    out = net.roi_spp_pool(fmap, [Region(0, 0, 24, 24)], stride=4, grid=1)
    np.testing.assert_array_equal(out.data[0], fmap.data.max(axis=(0, 1)))


def test_spp_constant_map_gives_constant():
    fmap = Tensor(np.full((5, 5, 2), 3.25))
    out = net.roi_spp_pool(fmap, [Region(1, 1, 9, 13)], stride=2, grid=3)
    np.testing.assert_array_equal(out.data, 3.25)


def test_spp_matches_crop_pool_oracle_500_triples():
    rng = np.random.default_rng(9)
    for _ in range(500):
        hf, wf = rng.integers(2, 11, size=2)
        ch = int(rng.integers(1, 5))
        stride = int(rng.choice([1, 2, 4]))
        g = int(rng.integers(1, 5))
        fmap = rng.normal(size=(hf, wf, ch))
        w, h = int(wf) * stride, int(hf) * stride
        x0 = int(rng.integers(0, w))
        y0 = int(rng.integers(0, h))
        region = Region(x0, y0, x0 + int(rng.integers(1, w - x0 + 1)),
                        y0 + int(rng.integers(1, h - y0 + 1)))
        got = net.roi_spp_pool(Tensor(fmap), [region], stride, g).data[0]
        want = oracle_crop_pool(fmap, region, stride, g)
        assert np.array_equal(got, want), (region, stride, g)


def test_spp_batches_regions_row_per_region():
    rng = np.random.default_rng(10)
    fmap = rng.normal(size=(8, 8, 2))
    regions = [Region(0, 0, 16, 16), Region(4, 4, 20, 28), Region(1, 2, 3, 4)]
    out = net.roi_spp_pool(Tensor(fmap), regions, stride=4, grid=2).data
    for i, r in enumerate(regions):
        np.testing.assert_array_equal(out[i], oracle_crop_pool(fmap, r, 4, 2))


def test_spp_rejects_empty_region_list():
    with pytest.raises(ValueError):
        net.roi_spp_pool(Tensor(np.zeros((4, 4, 1))), [], stride=1, grid=2)


def test_spp_gradient_routes_to_argmax_only():
    rng = np.random.default_rng(11)
    fmap_data = rng.permutation(np.arange(36.0)).reshape(6, 6, 1)
    fmap = Tensor(fmap_data, requires_grad=True)
    backward(ad.tsum(net.roi_spp_pool(fmap, [Region(0, 0, 6, 6)], 1, 2)))
    assert fmap.grad.sum() == 4.0  # one unit per bin
    assert ((fmap.grad == 0) | (fmap.grad == 1)).all()


def test_spp_gradient_matches_fd():
    rng = np.random.default_rng(12)
    fmap_data = rng.normal(size=(5, 6, 2))
    w = rng.normal(size=(2, 2 * 2 * 2))
    regions = [Region(0, 0, 10, 10), Region(3, 2, 12, 10)]

    def build(t):
        pooled = net.roi_spp_pool(t, regions, stride=2, grid=2)
        return ad.tsum(ad.mul(pooled, Tensor(w)))

    t = Tensor(fmap_data, requires_grad=True)
    out = build(t)
    backward(out)
    fd = finite_difference_gradient(lambda x: build(x).item(), t)
    ok = ~fd.unreliable
    assert np.max(np.abs(t.grad[ok] - fd.grad[ok])) < 1e-6


# ---------------------------------------------------------------------------
# box-score scaling


def test_box_scale_equal_scores_is_identity():
    feats = Tensor(np.arange(6.0).reshape(2, 3))
    regions = [Region(0, 0, 2, 2, 0.4), Region(2, 0, 4, 2, 0.4)]
    out = net.box_score_scale(feats, regions)
    np.testing.assert_allclose(out.data, feats.data, atol=1e-15)


def test_box_scale_zero_score_zeroes_row():
    feats = Tensor(np.ones((2, 3)))
    regions = [Region(0, 0, 2, 2, 0.0), Region(2, 0, 4, 2, 0.8)]
    out = net.box_score_scale(feats, regions)
    np.testing.assert_array_equal(out.data[0], 0.0)
    np.testing.assert_array_equal(out.data[1], 1.0)


def test_box_scale_hand_fixture():
    feats = Tensor(np.ones((2, 2)))
    regions = [Region(0, 0, 2, 2, 0.5), Region(2, 0, 4, 2, 1.0)]
    out = net.box_score_scale(feats, regions)
    np.testing.assert_allclose(out.data, [[0.5, 0.5], [1.0, 1.0]], atol=1e-15)


def test_box_scale_requires_objectness():
    with pytest.raises(ValueError):
        net.box_score_scale(Tensor(np.ones((1, 2))), [Region(0, 0, 2, 2)])


def test_box_scale_feature_gradient_passes_through():
    regions = [Region(0, 0, 2, 2, 0.5), Region(2, 0, 4, 2, 1.0)]
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    backward(ad.tsum(net.box_score_scale(t, regions)))
    np.testing.assert_allclose(t.grad, [[0.5, 0.5], [1.0, 1.0]])


# ---------------------------------------------------------------------------
# fc stack and streams


def test_fc_stack_identity_on_nonnegative():
    params = ad.Parameters()
    params.add("fc6/w", np.eye(3))
    params.add("fc6/b", np.zeros(3))
    params.add("fc7/w", np.eye(3))
    params.add("fc7/b", np.zeros(3))
    x = np.abs(np.random.default_rng(1).normal(size=(4, 3)))
    out = net.fc_stack(Tensor(x), params)
    np.testing.assert_array_equal(out.data, x)


def test_fc_stack_zero_weights_zero_output():
    params = ad.Parameters()
    params.add("fc6/w", np.zeros((3, 5)))
    params.add("fc6/b", np.zeros(5))
    params.add("fc7/w", np.zeros((5, 2)))
    params.add("fc7/b", np.zeros(2))
    out = net.fc_stack(Tensor(np.random.default_rng(2).normal(size=(4, 3))), params)
    np.testing.assert_array_equal(out.data, 0.0)


def test_fc_stack_rows_independent_under_permutation():
    cfg = TINY
    params = make_params(cfg, seed=6)
    x = np.random.default_rng(7).normal(size=(5, cfg.pooled_width))
    perm = [3, 0, 4, 1, 2]
    straight = net.fc_stack(Tensor(x), params).data
    permuted = net.fc_stack(Tensor(x[perm]), params).data
    assert np.array_equal(permuted, straight[perm])


def test_classification_stream_fixtures():
    # two regions engineered so region 0 has logits [0,0] and region 1 [ln1, ln3]
    params = ad.Parameters()
    params.add("fc8c/w", np.array([[0.0, np.log(3.0)]]))
    params.add("fc8c/b", np.zeros(2))
    fc7 = Tensor(np.array([[0.0], [1.0]]))
    out = net.classification_stream(fc7, params)
    assert out.data.shape == (2, 2)
    np.testing.assert_allclose(out.data[:, 0], [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(out.data[:, 1], [0.25, 0.75], atol=1e-12)


def test_classification_columns_sum_to_one():
    cfg = TINY
    params = make_params(cfg, seed=8)
    fc7 = Tensor(np.random.default_rng(9).normal(size=(7, cfg.fc_widths[1])))
    out = net.classification_stream(fc7, params)
    np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-12)


def test_detection_stream_fixtures():
    # one class; three regions with logits ln1, ln1, ln2
    params = ad.Parameters()
    params.add("fc8d/w", np.array([[np.log(2.0)]]))
    params.add("fc8d/b", np.zeros(1))
    fc7 = Tensor(np.array([[0.0], [0.0], [1.0]]))
    out = net.detection_stream(fc7, params)
    np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.5]], atol=1e-12)


def test_detection_rows_sum_to_one():
    cfg = TINY
    params = make_params(cfg, seed=10)
    fc7 = Tensor(np.random.default_rng(11).normal(size=(6, cfg.fc_widths[1])))
    out = net.detection_stream(fc7, params)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_detection_single_region_rows_are_one():
    cfg = TINY
    params = make_params(cfg, seed=12)
    fc7 = Tensor(np.random.default_rng(13).normal(size=(1, cfg.fc_widths[1])))
    out = net.detection_stream(fc7, params)
    np.testing.assert_array_equal(out.data, np.ones((cfg.num_classes, 1)))


def test_combine_scores_hand_fixture():
    a = Tensor(np.array([[0.2, 0.8], [0.6, 0.4]]))
    b = Tensor(np.array([[0.7, 0.3], [0.1, 0.9]]))
    out = net.combine_scores(a, b)
    np.testing.assert_allclose(out.data, [[0.14, 0.24], [0.06, 0.36]], atol=1e-15)


def test_combine_scores_one_hot_masks_row():
    a = Tensor(np.array([[0.5, 0.5]]))
    b = Tensor(np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(net.combine_scores(a, b).data, [[0.0, 0.5]])


def test_combine_scores_shape_mismatch():
    with pytest.raises(ValueError):
        net.combine_scores(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_image_scores_hand_fixture():
    x = Tensor(np.array([[0.14, 0.24], [0.06, 0.36]]))
    np.testing.assert_allclose(net.image_scores(x).data, [0.38, 0.42], atol=1e-15)


def test_image_scores_single_class_exactly_one():
    for n in (1, 3, 7):
        det = np.random.default_rng(n).dirichlet(np.ones(n))[None, :]
        y = net.image_scores(Tensor(det))
        assert y.data.shape == (1,)
        assert y.data[0] == 1.0


def test_image_scores_open_interval():
    cfg = TINY
    params = make_params(cfg, seed=14)
    rng = np.random.default_rng(15)
    for _ in range(50):
        fc7 = net.fc_stack(Tensor(rng.normal(size=(4, cfg.pooled_width))), params)
        combined = net.combine_scores(net.classification_stream(fc7, params),
                                      net.detection_stream(fc7, params))
        y = net.image_scores(combined).data
        assert np.all((y > 0.0) & (y < 1.0))
        assert y.sum() <= cfg.num_classes


# ---------------------------------------------------------------------------
# whole-network properties


def forward_views(cfg, params, image, regions):
    return net.wsddn_forward(Tensor(image), regions, params, cfg)


def test_factorization_class_stream_stable_det_stream_not():
    cfg = TINY
    params = make_params(cfg, seed=16)
    rng = np.random.default_rng(17)
    image = rng.uniform(size=(16, 16, 1))
    base_regions = [Region(0, 0, 8, 8), Region(4, 4, 16, 16), Region(2, 0, 10, 12)]
    extra = Region(8, 8, 16, 16)
    small = forward_views(cfg, params, image, base_regions)
    big = forward_views(cfg, params, image, base_regions + [extra])
    # per-region class posteriors don't care what other regions exist
    np.testing.assert_allclose(big.class_probs.data[:, :3],
                               small.class_probs.data, atol=1e-12)
    # the region-competition stream renormalizes, so values must move
    assert np.max(np.abs(big.det_probs.data[:, :3] - small.det_probs.data)) > 1e-9


def test_det_stream_bias_shift_leaves_outputs_unchanged():
    cfg = TINY
    rng = np.random.default_rng(18)
    image = rng.uniform(size=(16, 16, 1))
    regions = [Region(0, 0, 8, 8), Region(4, 4, 16, 16), Region(0, 8, 12, 16)]
    out = []
    for shift in (0.0, 7.5):
        params = make_params(cfg, seed=19)
        params["fc8d/b"].data[1] += shift  # shifts one class row of the logits
        out.append(forward_views(cfg, params, image, regions))
    np.testing.assert_allclose(out[0].det_probs.data, out[1].det_probs.data, atol=1e-12)
    np.testing.assert_allclose(out[0].combined.data, out[1].combined.data, atol=1e-12)
    np.testing.assert_allclose(out[0].image.data, out[1].image.data, atol=1e-12)


def test_baseline_single_region_score_passthrough():
    params = ad.Parameters()
    params.add("fc8c/w", np.array([[1.0]]))
    params.add("fc8c/b", np.zeros(1))
    out = net.baseline_forward(Tensor(np.array([[2.5]])), params)
    np.testing.assert_allclose(out.data, [2.5], atol=1e-12)


def test_baseline_two_zero_scores_give_log_two():
    params = ad.Parameters()
    params.add("fc8c/w", np.zeros((3, 1)))
    params.add("fc8c/b", np.zeros(1))
    out = net.baseline_forward(Tensor(np.zeros((2, 3))), params)
    np.testing.assert_allclose(out.data, [np.log(2.0)], atol=1e-12)


def test_baseline_logsumexp_bounds():
    cfg = TINY
    params = make_params(cfg, seed=20)
    fc7 = Tensor(np.random.default_rng(21).normal(size=(6, cfg.fc_widths[1])))
    raw = fc7.data @ params["fc8c/w"].data + params["fc8c/b"].data
    out = net.baseline_forward(fc7, params).data
    assert np.all(out >= raw.max(axis=0))
    assert np.all(out <= raw.max(axis=0) + np.log(6))


def test_baseline_region_scores_shape_and_image_consistency():
    cfg = TINY
    params = make_params(cfg, seed=24)
    image = np.random.default_rng(25).uniform(size=(32, 32, 1))
    regions = [Region(0, 0, 16, 16), Region(8, 8, 32, 32), Region(4, 4, 24, 28)]
    out = net.baseline_scores(Tensor(image), regions, params, cfg)
    assert out.combined.data.shape == (cfg.num_classes, 3)
    # image score is the log-sum-exp of each class row
    want = np.log(np.exp(out.combined.data).sum(axis=1))
    np.testing.assert_allclose(out.image.data, want, atol=1e-12)
    np.testing.assert_allclose(
        net.baseline_image_scores(Tensor(image), regions, params, cfg).data,
        out.image.data, atol=1e-15)


def test_end_to_end_gradient_every_parameter():
    """Full forward on a 2-class, 5-region, 32x32 instance against central
    differences, parameter by parameter."""
    cfg = TINY
    params = make_params(cfg, seed=22)
    rng = np.random.default_rng(23)
    image = rng.uniform(size=(32, 32, 1))
    regions = [Region(0, 0, 16, 16), Region(8, 8, 32, 32), Region(4, 0, 20, 24),
               Region(16, 4, 30, 28), Region(0, 16, 14, 32)]
    wvec = rng.normal(size=cfg.num_classes)

    def loss_value():
        scores = net.wsddn_forward(Tensor(image), regions, params, cfg)
        return ad.tsum(ad.mul(scores.image, Tensor(wvec)))

    graph = ad.Graph(params)
    graph.backward(loss_value())
    grads = {name: p.grad.copy() for name, p in params.items()}
    for name, p in params.items():
        fd = finite_difference_gradient(lambda t: loss_value().item(), p)
        ok = ~fd.unreliable
        assert ok.mean() > 0.9, name
        rel = np.abs(grads[name][ok] - fd.grad[ok]) / np.maximum(1.0, np.abs(fd.grad[ok]))
        assert rel.size == 0 or rel.max() < 1e-4, name
