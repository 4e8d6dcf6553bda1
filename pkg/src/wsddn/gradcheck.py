"""Finite-difference verification suite for every differentiable primitive.

Each primitive gets many randomized instances: random leaf tensors (drawn
away from kinks where the op has any), a random linear projection to a
scalar so the backward pass sees a generic upstream gradient, and a
central-difference probe of every leaf coordinate. On top of the
primitives, the full training objective (data loss + overlap regularizer
+ L2 penalty) is probed at random parameter coordinates through the whole
network.

The suite reports the worst relative error per operation and is the thing
``wsddn gradcheck`` runs.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import ImageSample
from .network import ModelConfig, init_params
from .regions import Region
from .training import TrainConfig, total_energy

Case = tuple[Callable[[], Tensor], list[Tensor]]
CaseBuilder = Callable[[np.random.Generator], Case]

DEFAULT_TOLERANCE = 1e-4
ENERGY_NAME = "training_energy"


@dataclass
class CheckReport:
    name: str
    instances: int
    checked: int        # coordinates compared against the oracle
    skipped: int        # coordinates the oracle flagged as kink-adjacent
    worst: float        # worst relative error over checked coordinates
    seconds: float
    passed: bool


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from(rng, shape, magnitude_lo, magnitude_hi) -> Tensor:
    """Values whose magnitude stays in a band, so eps probes cannot cross 0."""
    mag = rng.uniform(magnitude_lo, magnitude_hi, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag * sign, requires_grad=True)


def _to_scalar(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Returns a closure mapping a same-shaped tensor to a fixed projection."""
    proj = Tensor(rng.normal(size=out.data.shape))
    return lambda t: ad.tsum(ad.mul(t, proj))


def _case_add(rng) -> Case:
    if rng.integers(2):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    else:
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))  # row-broadcast bias
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.add(a, b), proj)), [a, b]


def _case_add_const(rng) -> Case:
    t = _leaf(rng, (3, 4))
    c = float(rng.normal())
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.add_const(t, c), proj)), [t]


def _case_scale(rng) -> Case:
    t = _leaf(rng, (3, 4))
    k = float(rng.normal())
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.scale(t, k), proj)), [t]


def _case_mul(rng) -> Case:
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.mul(a, b), proj)), [a, b]


def _case_matmul(rng) -> Case:
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    proj = Tensor(rng.normal(size=(3, 2)))
    return lambda: ad.tsum(ad.mul(ad.matmul(a, b), proj)), [a, b]


def _case_relu(rng) -> Case:
    t = _away_from(rng, (3, 4), 0.05, 1.0)
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.relu(t), proj)), [t]


def _case_log(rng) -> Case:
    t = _leaf(rng, (3, 4), 0.2, 3.0)
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.log(t), proj)), [t]


def _case_exp(rng) -> Case:
    t = _leaf(rng, (3, 4), -2.0, 2.0)
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.exp(t), proj)), [t]


def _case_clamp(rng) -> Case:
    # keep every value at least 0.05 from either clamp boundary
    vals = rng.uniform(-1.2, 1.2, size=(3, 4))
    vals = np.where(np.abs(np.abs(vals) - 0.8) < 0.05, vals * 0.5, vals)
    t = Tensor(vals, requires_grad=True)
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.clamp(t, -0.8, 0.8), proj)), [t]


def _case_sum(rng) -> Case:
    t = _leaf(rng, (3, 4))
    axis = [None, 0, 1][rng.integers(3)]
    if axis is None:
        return lambda: ad.tsum(t), [t]
    proj_shape = (4,) if axis == 0 else (3,)
    proj = Tensor(rng.normal(size=proj_shape))
    return lambda: ad.tsum(ad.mul(ad.tsum(t, axis=axis), proj)), [t]


def _case_softmax(rng) -> Case:
    t = _leaf(rng, (3, 4), -3.0, 3.0)
    axis = int(rng.integers(2))
    proj = Tensor(rng.normal(size=(3, 4)))
    return lambda: ad.tsum(ad.mul(ad.softmax_axis(t, axis=axis), proj)), [t]


def _case_logsumexp(rng) -> Case:
    t = _leaf(rng, (3, 4), -3.0, 3.0)
    axis = int(rng.integers(2))
    proj_shape = (4,) if axis == 0 else (3,)
    proj = Tensor(rng.normal(size=proj_shape))
    return lambda: ad.tsum(ad.mul(ad.logsumexp_axis(t, axis=axis), proj)), [t]


def _case_transpose(rng) -> Case:
    t = _leaf(rng, (3, 4))
    proj = Tensor(rng.normal(size=(4, 3)))
    return lambda: ad.tsum(ad.mul(ad.transpose2d(t), proj)), [t]


def _case_reshape(rng) -> Case:
    t = _leaf(rng, (3, 4))
    proj = Tensor(rng.normal(size=(2, 6)))
    return lambda: ad.tsum(ad.mul(ad.reshape(t, (2, 6)), proj)), [t]


def _case_gather(rng) -> Case:
    t = _leaf(rng, (12,))
    idx = rng.integers(0, 12, size=6)  # repeats exercise gradient accumulation
    proj = Tensor(rng.normal(size=(6,)))
    return lambda: ad.tsum(ad.mul(ad.gather(t, idx), proj)), [t]


def _case_gather_rows(rng) -> Case:
    t = _leaf(rng, (5, 3))
    rows = rng.integers(0, 5, size=3)
    proj = Tensor(rng.normal(size=(3, 3)))
    return lambda: ad.tsum(ad.mul(ad.gather_rows(t, rows), proj)), [t]


def _case_concat(rng) -> Case:
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    axis = int(rng.integers(2))
    shape = (4, 3) if axis == 0 else (2, 6)
    proj = Tensor(rng.normal(size=shape))
    return lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=axis), proj)), [a, b]


def _case_maxpool(rng) -> Case:
    t = _leaf(rng, (4, 6, 2))
    proj = Tensor(rng.normal(size=(2, 3, 2)))
    return lambda: ad.tsum(ad.mul(ad.maxpool2x2(t), proj)), [t]


def _case_conv(rng) -> Case:
    img = _leaf(rng, (5, 6, 2))
    w = _leaf(rng, (3, 3, 2, 3))
    b = _leaf(rng, (3,))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    out_h = (5 + 2 * pad - 3) // stride + 1
    out_w = (6 + 2 * pad - 3) // stride + 1
    proj = Tensor(rng.normal(size=(out_h, out_w, 3)))
    return (lambda: ad.tsum(ad.mul(ad.conv2d(img, w, b, stride=stride, pad=pad), proj)),
            [img, w, b])


_CASES: dict[str, CaseBuilder] = {
    "add": _case_add,
    "add_const": _case_add_const,
    "scale": _case_scale,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "conv2d": _case_conv,
    "relu": _case_relu,
    "log": _case_log,
    "exp": _case_exp,
    "clamp": _case_clamp,
    "sum": _case_sum,
    "softmax": _case_softmax,
    "logsumexp": _case_logsumexp,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "gather": _case_gather,
    "gather_rows": _case_gather_rows,
    "concat": _case_concat,
    "maxpool": _case_maxpool,
}

PRIMITIVE_ROSTER: tuple[str, ...] = tuple(_CASES)


def _relative_errors(ad_grad: np.ndarray, fd: ad.FiniteDifferenceResult):
    ok = ~fd.unreliable
    rel = np.abs(ad_grad[ok] - fd.grad[ok]) / np.maximum(1.0, np.abs(fd.grad[ok]))
    return rel, int(ok.sum()), int(fd.unreliable.sum())


def check_primitive(name: str, instances: int = 100, seed: int = 0,
                    tolerance: float = DEFAULT_TOLERANCE,
                    corrupt: bool = False) -> CheckReport:
    """Run ``instances`` random gradient checks of one primitive."""
    builder = _CASES[name]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    start = time.perf_counter()
    worst = 0.0
    checked = skipped = 0
    for _ in range(instances):
        f, leaves = builder(rng)
        out = f()
        ad.backward(out)
        for leaf in leaves:
            grad = leaf.grad.copy()
            if corrupt:
                grad = grad + 0.01 * (1.0 + np.abs(grad))
            fd = ad.finite_difference_gradient(lambda _t: f().item(), leaf)
            rel, n_ok, n_bad = _relative_errors(grad, fd)
            checked += n_ok
            skipped += n_bad
            if rel.size:
                worst = max(worst, float(rel.max()))
    return CheckReport(name, instances, checked, skipped, worst,
                       time.perf_counter() - start, worst < tolerance)


def _random_regions(rng, width: int, height: int, count: int) -> list[Region]:
    regions = []
    for _ in range(count):
        w = int(rng.integers(4, width))
        h = int(rng.integers(4, height))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        regions.append(Region(x0, y0, x0 + w, y0 + h,
                              objectness=float(rng.uniform(0.1, 1.0))))
    return regions


def _energy_case(rng):
    cfg = ModelConfig(in_channels=1, conv_channels=(2, 4), spp_grid=2,
                      fc_widths=(8, 8), num_classes=2,
                      use_box_score=bool(rng.integers(2)))
    tcfg = TrainConfig(weight_decay=0.01, reg_weight=0.3, reg_iou=0.5)
    params = init_params(cfg, rng)
    side = 16
    batch = []
    for i in range(2):
        labels = rng.choice([-1, 1], size=cfg.num_classes)
        labels[rng.integers(cfg.num_classes)] = 1  # at least one positive
        batch.append(ImageSample(
            image_id=f"probe{i}",
            image=rng.uniform(0.0, 1.0, size=(side, side, 1)),
            labels=labels,
            proposals=_random_regions(rng, side, side, 4)))
    return params, lambda: total_energy(batch, params, cfg, tcfg)


def check_energy(instances: int = 100, seed: int = 0,
                 tolerance: float = DEFAULT_TOLERANCE,
                 corrupt: bool = False) -> CheckReport:
    """Probe random parameter coordinates of the full training objective.

    One instance = one coordinate of one parameter tensor, on a freshly
    drawn network and two-image batch, compared against a central
    difference through the entire forward pass (both loss terms and the
    L2 penalty included). Kink-straddling probes are skipped and retried.
    """
    rng = np.random.default_rng([seed, 0xE4E])
    eps = 1e-5
    start = time.perf_counter()
    worst = 0.0
    checked = skipped = 0
    attempts = 0
    while checked < instances and attempts < 4 * instances:
        attempts += 1
        params, energy = _energy_case(rng)
        graph = ad.Graph(params)
        graph.backward(energy())
        names = [n for n, _ in params.items()]
        name = names[rng.integers(len(names))]
        tensor = params[name]
        i = int(rng.integers(tensor.data.size))
        ad_grad = float(tensor.grad.reshape(-1)[i])
        if corrupt:
            ad_grad = ad_grad + 0.01 * (1.0 + abs(ad_grad))
        flat = tensor.data.reshape(-1)
        orig = flat[i]
        base = energy().item()
        flat[i] = orig + eps
        hi = energy().item()
        flat[i] = orig - eps
        lo = energy().item()
        flat[i] = orig
        central = (hi - lo) / (2.0 * eps)
        gap = abs((hi - base) / eps - (base - lo) / eps)
        if gap > 1e-4 * (1.0 + abs(central)):
            skipped += 1
            continue
        checked += 1
        worst = max(worst, abs(ad_grad - central) / max(1.0, abs(central)))
    return CheckReport(ENERGY_NAME, checked, checked, skipped, worst,
                       time.perf_counter() - start,
                       worst < tolerance and checked >= instances)


def run_suite(instances: int = 100, seed: int = 0,
              tolerance: float = DEFAULT_TOLERANCE,
              corrupt: str | None = None) -> list[CheckReport]:
    """Check every primitive plus the full objective; returns all reports.

    ``corrupt`` names an operation whose measured gradient is deliberately
    biased before comparison; the suite must then report it as failed
    (self-test of the detection machinery).
    """
    if corrupt is not None and corrupt not in _CASES and corrupt != ENERGY_NAME:
        raise ValueError(f"unknown operation to corrupt: {corrupt!r}")
    reports = [check_primitive(name, instances, seed, tolerance,
                               corrupt=(name == corrupt))
               for name in PRIMITIVE_ROSTER]
    reports.append(check_energy(instances, seed, tolerance,
                                corrupt=(corrupt == ENERGY_NAME)))
    return reports


def format_report(reports: list[CheckReport],
                  tolerance: float = DEFAULT_TOLERANCE) -> str:
    lines = [f"{'operation':<16} {'instances':>9} {'coords':>7} "
             f"{'skipped':>7} {'worst-rel':>10}  result"]
    for r in reports:
        lines.append(f"{r.name:<16} {r.instances:>9} {r.checked:>7} "
                     f"{r.skipped:>7} {r.worst:>10.3e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    bad = [r.name for r in reports if not r.passed]
    if bad:
        lines.append(f"FAILED ({tolerance:g} tolerance): {', '.join(bad)}")
    else:
        lines.append(f"all gradient checks passed below {tolerance:g}")
    return "\n".join(lines)
