"""One test per shipped guarantee, at the stated tolerance.

The end-to-end localization runs (emergence, ablation, determinism) drive
the real CLI on the default dataset and share module-scoped fixtures, so
this file is the slow part of the suite. Everything else is property
checks against independent oracles written here, not in the package.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from wsddn import cli
from wsddn import network as net
from wsddn.autodiff import Tensor
from wsddn.evaluation import Detection, average_precision, corloc, nms
from wsddn.gradcheck import ENERGY_NAME, PRIMITIVE_ROSTER, run_suite
from wsddn.network import ModelConfig, init_params, roi_spp_pool
from wsddn.regions import Region, iou

REPORT = "report.txt"


# ---------------------------------------------------------------------------
# gradients


def test_gradient_suite_matches_finite_differences():
    start = time.monotonic()
    reports = run_suite(instances=100, seed=0, tolerance=1e-4)
    elapsed = time.monotonic() - start
    assert [r.name for r in reports] == list(PRIMITIVE_ROSTER) + [ENERGY_NAME]
    for r in reports:
        assert r.instances >= 100
        assert r.passed, f"{r.name}: worst relative error {r.worst:.3e}"
        assert r.worst < 1e-4
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# normalization invariants


def _random_region(rng, width, height):
    x0 = int(rng.integers(0, width - 1))
    y0 = int(rng.integers(0, height - 1))
    x1 = int(rng.integers(x0 + 1, width + 1))
    y1 = int(rng.integers(y0 + 1, height + 1))
    return Region(x0, y0, x1, y1)


def test_normalization_invariants_over_1000_forwards():
    rng = np.random.default_rng(20)
    for _ in range(1000):
        c = int(rng.integers(2, 5))
        cfg = ModelConfig(conv_channels=(2,), spp_grid=1,
                          fc_widths=(4, 4), num_classes=c)
        params = init_params(cfg, rng)
        image = rng.uniform(0.0, 1.0, (8, 8, 1))
        regions = [_random_region(rng, 8, 8)
                   for _ in range(int(rng.integers(1, 5)))]
        sc = net.wsddn_forward(Tensor(image), regions, params, cfg)
        cols = sc.class_probs.data.sum(axis=0)
        rows = sc.det_probs.data.sum(axis=1)
        assert np.all(np.abs(cols - 1.0) <= 1e-12)
        assert np.all(np.abs(rows - 1.0) <= 1e-12)
        y = sc.image.data
        assert y.shape == (c,)
        assert np.all(y > 0.0) and np.all(y < 1.0)


def test_single_class_image_score_is_exactly_one():
    rng = np.random.default_rng(21)
    cfg = ModelConfig(conv_channels=(2,), spp_grid=1,
                      fc_widths=(4, 4), num_classes=1)
    for _ in range(10):
        params = init_params(cfg, rng)
        image = rng.uniform(0.0, 1.0, (8, 8, 1))
        regions = [_random_region(rng, 8, 8)
                   for _ in range(int(rng.integers(1, 5)))]
        sc = net.wsddn_forward(Tensor(image), regions, params, cfg)
        assert sc.image.data.shape == (1,)
        assert sc.image.data[0] == 1.0


# ---------------------------------------------------------------------------
# oracle equivalences


def _oracle_span(length, grid, b):
    # same documented contract, recomputed scalar-wise: earlier bins take
    # the remainder, bins past a short span repeat the last occupied cell
    base, rem = divmod(length, grid)
    start = b * base + min(b, rem)
    size = base + (1 if b < rem else 0)
    start = min(start, length - 1)
    return start, max(start + size, start + 1)


def _crop_then_pool(fmap, region, stride, grid):
    hf, wf, ch = fmap.shape
    x0 = min(region.x0 // stride, wf - 1)
    x1 = max(min(-(-region.x1 // stride), wf), x0 + 1)
    y0 = min(region.y0 // stride, hf - 1)
    y1 = max(min(-(-region.y1 // stride), hf), y0 + 1)
    crop = fmap[y0:y1, x0:x1]
    out = np.empty((grid, grid, ch))
    for by in range(grid):
        ys, ye = _oracle_span(crop.shape[0], grid, by)
        for bx in range(grid):
            xs, xe = _oracle_span(crop.shape[1], grid, bx)
            out[by, bx] = crop[ys:ye, xs:xe].max(axis=(0, 1))
    return out.reshape(-1)


def test_roi_pool_matches_crop_then_pool_on_500_triples():
    rng = np.random.default_rng(30)
    for _ in range(500):
        hf, wf = int(rng.integers(2, 11)), int(rng.integers(2, 11))
        ch = int(rng.integers(1, 4))
        stride = int(rng.choice([1, 2, 4]))
        grid = int(rng.integers(1, 5))
        fmap = rng.normal(size=(hf, wf, ch))
        regions = [_random_region(rng, wf * stride, hf * stride)
                   for _ in range(int(rng.integers(1, 6)))]
        pooled = roi_spp_pool(Tensor(fmap), regions, stride, grid).data
        for i, r in enumerate(regions):
            assert np.array_equal(pooled[i], _crop_then_pool(fmap, r, stride, grid))


def _brute_force_nms(dets, threshold):
    # repeatedly promote the best-scored survivor, drop what it overlaps
    remaining = list(enumerate(dets))
    kept = []
    while remaining:
        pos = min(range(len(remaining)),
                  key=lambda p: (-remaining[p][1].score, remaining[p][0]))
        _, top = remaining.pop(pos)
        kept.append(top)
        remaining = [(j, d) for j, d in remaining
                     if iou(top.region, d.region) <= threshold]
    return kept


def test_nms_matches_brute_force_on_1000_instances():
    rng = np.random.default_rng(31)
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        dets = [Detection(0, _random_region(rng, 30, 30), float(rng.uniform()))
                for _ in range(n)]
        threshold = float(rng.uniform(0.2, 0.7))
        assert nms(dets, threshold) == _brute_force_nms(dets, threshold)


# ---------------------------------------------------------------------------
# metric fixtures


def test_ap_fixture_tp_fp_tp_with_two_gt():
    gt = {"im0": [Region(0, 0, 10, 10), Region(20, 20, 30, 30)]}
    dets = [("im0", Detection(0, Region(0, 0, 10, 10), 0.9)),     # TP
            ("im0", Detection(0, Region(40, 40, 50, 50), 0.8)),   # FP
            ("im0", Detection(0, Region(20, 20, 30, 30), 0.7))]   # TP
    ap = average_precision(dets, gt)
    assert abs(ap - 28.0 / 33.0) <= 1e-9


def test_iou_fixture_is_one_seventh():
    assert abs(iou(Region(0, 0, 2, 2), Region(1, 1, 3, 3)) - 1.0 / 7.0) <= 1e-12


def test_oracle_detections_reach_perfect_scores():
    gt = {
        "a": [(0, Region(1, 1, 7, 7)), (1, Region(10, 2, 16, 9))],
        "b": [(0, Region(3, 5, 12, 14))],
        "c": [(1, Region(2, 2, 6, 6)), (1, Region(8, 8, 14, 13))],
    }
    aps, corlocs = [], []
    for c in (0, 1):
        class_gt = {img: [r for k, r in pairs if k == c]
                    for img, pairs in gt.items()}
        dets, score = [], 1.0
        for img, boxes in class_gt.items():
            for r in boxes:
                dets.append((img, Detection(c, r, score)))
                score -= 0.05
        aps.append(average_precision(dets, class_gt))
        top = {}
        for img, d in dets:
            if img not in top or d.score > top[img].score:
                top[img] = d
        corlocs.append(corloc(top, class_gt))
    assert 100.0 * float(np.mean(aps)) == 100.0
    assert float(np.mean(corlocs)) == 100.0


# ---------------------------------------------------------------------------
# end-to-end runs on the default dataset


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _metrics(out_dir):
    """Parse report.txt into {row_name: (ap, corloc)}."""
    per = {}
    for line in (Path(out_dir) / REPORT).read_text().splitlines():
        parts = line.split()
        if len(parts) == 5 and parts[1] == "ap":
            per[parts[0]] = (float(parts[2]), float(parts[4]))
    assert "mean" in per, f"no mean row in {out_dir}/{REPORT}"
    return per


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Default dataset, then a 20-epoch run of each variant, timed."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    start = time.monotonic()
    assert _run("gen-data", f"--run.data_dir={data}") == 0
    runs = {}
    for name, extra in (("wsddn", ()), ("baseline", ("--variant", "baseline"))):
        out = root / name
        assert _run("train", f"--run.data_dir={data}",
                    f"--run.out_dir={out}", *extra) == 0
        assert _run("eval", out / "checkpoint.wten",
                    f"--run.data_dir={data}", f"--run.out_dir={out}") == 0
        runs[name] = _metrics(out)
    elapsed = time.monotonic() - start
    return dict(root=root, data=data, runs=runs, elapsed=elapsed)


@pytest.fixture(scope="module")
def ablation(pipeline):
    """The two scoring toggles, trained identically on the same data."""
    runs = {}
    for name, extra in (("box-score", ("--box-score", "on")),
                        ("spatial-reg", ("--spatial-reg", "on"))):
        out = pipeline["root"] / name.replace("-", "_")
        assert _run("train", f"--run.data_dir={pipeline['data']}",
                    f"--run.out_dir={out}", *extra) == 0
        assert _run("eval", out / "checkpoint.wten",
                    f"--run.data_dir={pipeline['data']}",
                    f"--run.out_dir={out}") == 0
        runs[name] = _metrics(out)
    return runs


def test_weak_localization_emerges_from_image_labels(pipeline, capsys):
    two_stream = pipeline["runs"]["wsddn"]["mean"]
    one_stream = pipeline["runs"]["baseline"]["mean"]
    with capsys.disabled():
        print(f"\n[emergence] wsddn mAP {two_stream[0]:.1f} corloc {two_stream[1]:.1f}"
              f" | baseline mAP {one_stream[0]:.1f} corloc {one_stream[1]:.1f}"
              f" | {pipeline['elapsed']:.0f}s", end="")
    assert two_stream[0] >= 30.0, f"test mAP {two_stream[0]:.2f} below 30"
    assert two_stream[1] >= 60.0, f"train corloc {two_stream[1]:.2f} below 60"
    assert two_stream[0] > one_stream[0], "does not beat the one-stream mAP"
    assert two_stream[1] > one_stream[1], "does not beat the one-stream corloc"
    assert pipeline["elapsed"] <= 15 * 60, f"{pipeline['elapsed']:.0f}s over budget"


def test_ablation_toggles_each_move_map(pipeline, ablation, capsys):
    base = pipeline["runs"]["wsddn"]["mean"][0]
    box = ablation["box-score"]["mean"][0]
    reg = ablation["spatial-reg"]["mean"][0]
    ordering = sorted([("plain", base), ("box-score", box), ("spatial-reg", reg)],
                      key=lambda kv: -kv[1])
    with capsys.disabled():
        print("\n[ablation] " + "  ".join(f"{n} {v:.2f}" for n, v in ordering),
              end="")
    assert box != base, "box-score scaling left mAP untouched"
    assert reg != base, "the overlap regularizer left mAP untouched"
    assert reg >= base - 2.0, f"regularizer cost {base - reg:.2f} mAP points"


def test_two_pipeline_runs_are_bit_identical(tmp_path):
    outs = []
    for run_dir in (tmp_path / "first", tmp_path / "second"):
        data, out = run_dir / "data", run_dir / "out"
        assert _run("gen-data", f"--run.data_dir={data}", "--seed", "7",
                    "--dataset.train_count=60", "--dataset.test_count=15") == 0
        assert _run("train", f"--run.data_dir={data}", f"--run.out_dir={out}",
                    "--seed", "7", "--train.epochs=3") == 0
        assert _run("eval", out / "checkpoint.wten",
                    f"--run.data_dir={data}", f"--run.out_dir={out}") == 0
        outs.append(out)
    first, second = outs
    assert (first / cli.CHECKPOINT_NAME).read_bytes() == \
           (second / cli.CHECKPOINT_NAME).read_bytes()
    assert (first / REPORT).read_bytes() == (second / REPORT).read_bytes()
