"""Command-line entry point.

Subcommands: gen-data (synthesize a dataset directory), train (fit either
the two-stream detector or the single-stream baseline), eval (AP on the
test split, CorLoc on the train split), detect (per-image detections plus
an overlay image), gradcheck (finite-difference verification suite).

Configuration comes from an optional TOML file with [run], [dataset],
[proposals], [model] and [train] sections, overridable from the command
line with dotted --section.key=value arguments plus a few named flags.
Exit codes: 0 success, 1 configuration/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from . import network as net
from .autodiff import NumericError, ParseError, Parameters, Tensor, load_tensors, save_tensors
from .dataset import DatasetConfig, ImageSample, generate_dataset, read_dataset, write_dataset
from .evaluation import (NMS_IOU, Detection, View, average_precision, corloc,
                         ensemble_average, format_report, multi_view_scores, nms,
                         write_detections)
from .gradcheck import format_report as format_gradcheck_report
from .gradcheck import run_suite
from .images import draw_box, to_rgb
from .network import ModelConfig, init_params
from .proposals import ProposalConfig
from .training import TrainConfig, train

VELOCITY_PREFIX = "__velocity__/"
META_PREFIX = "__meta__/"
CHECKPOINT_NAME = "checkpoint.wten"

# weight applied to the overlap regularizer when --spatial-reg on is given
# without an explicit train.reg_weight; above ~0.3 the penalty starts to
# dominate the label loss on the default dataset and costs several mAP
SPATIAL_REG_DEFAULT_WEIGHT = 0.1

SECTIONS = ("run", "dataset", "proposals", "model", "train")

RUN_DEFAULTS = {
    "data_dir": "data",
    "out_dir": "out",
    "variant": "wsddn",
    "box_score": False,
    "spatial_reg": False,
    "multi_view": False,
    "seed": 0,
    "force": False,
    "resume": "",
    "ensemble": (),
    "det_threshold": 0.0,
    "gradcheck_instances": 100,
    "gradcheck_corrupt": "",
}


class UsageError(ValueError):
    """Bad flags or config values; maps to exit code 1."""


@dataclass
class RunConfig:
    """Everything a command needs, assembled from defaults, the config
    file, dotted overrides and named flags (in increasing precedence)."""

    dataset: DatasetConfig
    proposals: ProposalConfig
    train: TrainConfig
    model_kwargs: dict = field(default_factory=dict)
    variant: str = "wsddn"
    box_score: bool = False
    box_score_explicit: bool = False
    variant_explicit: bool = False
    multi_view: bool = False
    seed: int = 0
    force: bool = False
    data_dir: str = "data"
    out_dir: str = "out"
    resume: str = ""
    ensemble: tuple[str, ...] = ()
    det_threshold: float = 0.0
    gradcheck_instances: int = 100
    gradcheck_corrupt: str = ""

    def __post_init__(self):
        if self.variant not in ("wsddn", "baseline"):
            raise UsageError(f"variant must be wsddn or baseline, got {self.variant!r}")

    def model_config(self, num_classes: int) -> ModelConfig:
        try:
            return ModelConfig(num_classes=num_classes,
                               use_box_score=self.box_score, **self.model_kwargs)
        except TypeError as exc:
            raise UsageError(f"bad [model] option: {exc}") from None


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _parse_override_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare string such as --run.variant=baseline


def parse_overrides(extras: list[str]) -> dict:
    """``--section.key=value`` arguments into a nested dict."""
    out: dict[str, dict] = {}
    for raw in extras:
        if not raw.startswith("--") or "=" not in raw:
            raise UsageError(f"unrecognized argument {raw!r}")
        dotted, value = raw[2:].split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or not all(parts):
            raise UsageError(f"override must look like --section.key=value, got {raw!r}")
        section, key = parts
        if section not in SECTIONS:
            raise UsageError(f"unknown config section {section!r} in {raw!r}")
        out.setdefault(section, {})[key.replace("-", "_")] = _parse_override_value(value)
    return out


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    try:
        data = tomllib.loads(blob.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    for section in data:
        if section not in SECTIONS:
            raise UsageError(f"{path}: unknown section [{section}]")
    return data


def _build(section_name, cls, kwargs):
    try:
        return cls(**{k: _tuplify(v) for k, v in kwargs.items()})
    except TypeError as exc:
        raise UsageError(f"bad [{section_name}] option: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"[{section_name}]: {exc}") from None


def build_run_config(args, extras: list[str]) -> RunConfig:
    merged = load_config_file(args.config)
    for section, pairs in parse_overrides(extras).items():
        merged.setdefault(section, {}).update(pairs)

    run = dict(RUN_DEFAULTS)
    run.update(merged.get("run", {}))
    unknown = set(run) - set(RUN_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown [run] option(s): {', '.join(sorted(unknown))}")

    # named flags win over everything
    if args.seed is not None:
        run["seed"] = args.seed
    variant_explicit = args.variant is not None or "variant" in merged.get("run", {})
    if args.variant is not None:
        run["variant"] = args.variant
    box_explicit = args.box_score is not None or "box_score" in merged.get("run", {})
    if args.box_score is not None:
        run["box_score"] = args.box_score == "on"
    if args.spatial_reg is not None:
        run["spatial_reg"] = args.spatial_reg == "on"
    if args.multi_view is not None:
        run["multi_view"] = args.multi_view == "on"
    if args.force:
        run["force"] = True
    if getattr(args, "ensemble", None):
        run["ensemble"] = tuple(p for p in args.ensemble.split(",") if p)

    seed = int(run["seed"])
    dataset_kwargs = dict(merged.get("dataset", {}))
    dataset_kwargs.setdefault("seed", seed)
    train_kwargs = dict(merged.get("train", {}))
    train_kwargs.setdefault("seed", seed)
    if run["spatial_reg"]:
        if float(train_kwargs.get("reg_weight", 0.0)) == 0.0:
            train_kwargs["reg_weight"] = SPATIAL_REG_DEFAULT_WEIGHT
    else:
        train_kwargs["reg_weight"] = 0.0

    model_kwargs = dict(merged.get("model", {}))
    model_kwargs.pop("num_classes", None)   # always follows the dataset
    model_kwargs.pop("use_box_score", None)  # controlled by the toggle
    model_kwargs = {k: _tuplify(v) for k, v in model_kwargs.items()}

    return RunConfig(
        dataset=_build("dataset", DatasetConfig, dataset_kwargs),
        proposals=_build("proposals", ProposalConfig, merged.get("proposals", {})),
        train=_build("train", TrainConfig, train_kwargs),
        model_kwargs=model_kwargs,
        variant=str(run["variant"]),
        box_score=bool(run["box_score"]),
        box_score_explicit=box_explicit,
        variant_explicit=variant_explicit,
        multi_view=bool(run["multi_view"]),
        seed=seed,
        force=bool(run["force"]),
        data_dir=str(run["data_dir"]),
        out_dir=str(run["out_dir"]),
        resume=str(run["resume"]),
        ensemble=tuple(run["ensemble"]),
        det_threshold=float(run["det_threshold"]),
        gradcheck_instances=int(run["gradcheck_instances"]),
        gradcheck_corrupt=str(run["gradcheck_corrupt"]),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Parameters, velocity: dict[str, np.ndarray],
                    epoch: int, variant: str, use_box_score: bool) -> None:
    named = dict(params.state())
    for name, v in velocity.items():
        named[VELOCITY_PREFIX + name] = v
    named[META_PREFIX + "epoch"] = np.array([float(epoch)])
    named[META_PREFIX + "baseline"] = np.array([1.0 if variant == "baseline" else 0.0])
    named[META_PREFIX + "box_score"] = np.array([1.0 if use_box_score else 0.0])
    save_tensors(path, named)


def load_checkpoint(path):
    """Returns (parameter state, velocity state, meta dict)."""
    named = load_tensors(path)
    state, velocity, meta = {}, {}, {}
    for name, arr in named.items():
        if name.startswith(VELOCITY_PREFIX):
            velocity[name[len(VELOCITY_PREFIX):]] = arr
        elif name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = float(arr.reshape(-1)[0])
        else:
            state[name] = arr
    if not state:
        raise UsageError(f"{path}: no parameter tensors found")
    return state, velocity, meta


def _verify_checkpoint_shapes(state: dict, model_cfg: ModelConfig, path) -> None:
    expected = {name: p.data.shape
                for name, p in init_params(model_cfg, np.random.default_rng(0)).items()}
    if "fc8c/w" in state and state["fc8c/w"].shape[1] != model_cfg.num_classes:
        raise UsageError(
            f"{path}: checkpoint was trained for {state['fc8c/w'].shape[1]} classes, "
            f"dataset has {model_cfg.num_classes}")
    got = {name: arr.shape for name, arr in state.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in set(got) & set(expected) if got[n] != expected[n])
        raise UsageError(f"{path}: checkpoint does not match the model config "
                         f"(missing {missing}, unexpected {extra}, wrong shape {wrong})")


# ---------------------------------------------------------------------------
# shared scoring helpers


def _eval_views(cfg: RunConfig, image: np.ndarray) -> list[View]:
    if not cfg.multi_view:
        return [View(False, 1.0)]
    longest = max(image.shape[0], image.shape[1])
    return [View(flip, target / longest)
            for target in cfg.train.jitter_scales for flip in (False, True)]


def score_image(sample: ImageSample, params_list: list[Parameters],
                model_cfg: ModelConfig, variant: str,
                views: list[View]) -> np.ndarray:
    """Combined per-region class scores (C x |R|), averaged over views and
    over ensemble members."""
    per_model = []
    for params in params_list:
        if variant == "baseline":
            def forward(img, regs, p=params):
                return net.baseline_scores(Tensor(img), regs, p, model_cfg)
        else:
            def forward(img, regs, p=params):
                return net.wsddn_forward(Tensor(img), regs, p, model_cfg)
        combined, _ = multi_view_scores(forward, sample.image, sample.proposals, views)
        per_model.append(combined)
    return ensemble_average(per_model)


def detections_for_image(sample: ImageSample, scores: np.ndarray,
                         threshold: float | None = None) -> list[Detection]:
    """Per-class NMS over the scored proposals; optional score floor."""
    dets: list[Detection] = []
    for c in range(scores.shape[0]):
        cls = [Detection(c, region, float(s))
               for region, s in zip(sample.proposals, scores[c])
               if threshold is None or s > threshold]
        dets.extend(nms(cls, NMS_IOU))
    return dets


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.data_dir)
    if out.exists() and any(out.iterdir()) and not cfg.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    splits = generate_dataset(cfg.dataset, cfg.proposals)
    write_dataset(out, splits, cfg.dataset.class_names)
    for split, samples in splits.items():
        print(f"{split} {len(samples)}")
    print(f"dataset written to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    splits, class_names = read_dataset(cfg.data_dir, with_gt=False)
    if "train" not in splits:
        raise UsageError(f"{cfg.data_dir}: no train split")
    model_cfg = cfg.model_config(len(class_names))

    params = velocity = None
    start_epoch = 0
    if cfg.resume:
        state, vel_state, meta = load_checkpoint(cfg.resume)
        _verify_checkpoint_shapes(state, model_cfg, cfg.resume)
        params = Parameters.from_state(state)
        velocity = vel_state or None
        start_epoch = int(meta.get("epoch", 0))
        print(f"resuming from {cfg.resume} at epoch {start_epoch}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, log_lines, velocity = train(
        splits["train"], model_cfg, cfg.train, variant=cfg.variant,
        params=params, velocity=velocity, start_epoch=start_epoch, log=print)

    final_epoch = max(start_epoch, cfg.train.epochs)
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(ckpt, params, velocity, final_epoch, cfg.variant, cfg.box_score)
    with open(out / "train_log.txt", "a" if cfg.resume else "w",
              encoding="ascii") as fh:
        fh.writelines(line + "\n" for line in log_lines)
    print(f"checkpoint written to {ckpt}")
    return 0


def _load_members(cfg: RunConfig, paths: list[str], num_classes: int):
    """Load ensemble members; returns (params list, meta of the first)."""
    members, first_meta = [], None
    for path in paths:
        state, _, meta = load_checkpoint(path)
        if first_meta is None:
            first_meta = meta
        model_cfg = cfg.model_config(num_classes)
        _verify_checkpoint_shapes(state, model_cfg, path)
        members.append(Parameters.from_state(state))
    return members, first_meta or {}


def _resolve_eval_options(cfg: RunConfig, meta: dict) -> RunConfig:
    """Checkpoint metadata fills in variant/box-score unless given explicitly."""
    if not cfg.variant_explicit and "baseline" in meta:
        cfg.variant = "baseline" if meta["baseline"] else "wsddn"
    if not cfg.box_score_explicit and "box_score" in meta:
        cfg.box_score = bool(meta["box_score"])
    return cfg


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    paths = list(cfg.ensemble) or ([checkpoint] if checkpoint else [])
    if not paths:
        raise UsageError("eval needs a checkpoint argument or --ensemble")
    splits, class_names = read_dataset(cfg.data_dir, with_gt=True)
    if "test" not in splits or "train" not in splits:
        raise UsageError(f"{cfg.data_dir}: needs train and test splits")
    num_classes = len(class_names)
    members, meta = _load_members(cfg, paths, num_classes)
    cfg = _resolve_eval_options(cfg, meta)
    model_cfg = cfg.model_config(num_classes)

    ap_per_class: list[float | None] = []
    test_dets: list[list[tuple[str, Detection]]] = [[] for _ in range(num_classes)]
    for sample in splits["test"]:
        scores = score_image(sample, members, model_cfg, cfg.variant,
                             _eval_views(cfg, sample.image))
        for det in detections_for_image(sample, scores):
            test_dets[det.class_index].append((sample.image_id, det))
    for c in range(num_classes):
        gt_c = {s.image_id: [r for cls, r in s.gt if cls == c] for s in splits["test"]}
        ap_per_class.append(average_precision(test_dets[c], gt_c))

    corloc_per_class: list[float | None] = []
    top: list[dict[str, Detection]] = [{} for _ in range(num_classes)]
    for sample in splits["train"]:
        scores = score_image(sample, members, model_cfg, cfg.variant,
                             _eval_views(cfg, sample.image))
        best = np.argmax(scores, axis=1)
        for c in range(num_classes):
            top[c][sample.image_id] = Detection(
                c, sample.proposals[best[c]], float(scores[c, best[c]]))
    for c in range(num_classes):
        gt_c = {s.image_id: [r for cls, r in s.gt if cls == c] for s in splits["train"]}
        corloc_per_class.append(corloc(top[c], gt_c))

    report = format_report(ap_per_class, corloc_per_class, list(class_names))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report, encoding="ascii")
    print(report, end="")
    return 0


def cmd_detect(cfg: RunConfig, checkpoint: str, image_id: str) -> int:
    splits, class_names = read_dataset(cfg.data_dir, with_gt=False)
    sample = next((s for samples in splits.values() for s in samples
                   if s.image_id == image_id), None)
    if sample is None:
        raise UsageError(f"image {image_id!r} not found in {cfg.data_dir}")
    num_classes = len(class_names)
    members, meta = _load_members(cfg, [checkpoint], num_classes)
    cfg = _resolve_eval_options(cfg, meta)
    model_cfg = cfg.model_config(num_classes)

    scores = score_image(sample, members, model_cfg, cfg.variant,
                         _eval_views(cfg, sample.image))
    dets = detections_for_image(sample, scores, threshold=cfg.det_threshold)
    dets.sort(key=lambda d: -d.score)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    det_path = out / f"detections_{image_id}.txt"
    write_detections(det_path, [(image_id, d) for d in dets])

    rgb = to_rgb(sample.image)
    peak = max((d.score for d in dets), default=1.0)
    for d in sorted(dets, key=lambda d: d.score):  # strongest drawn last
        strength = 0.4 + 0.6 * (d.score / peak if peak > 0 else 1.0)
        draw_box(rgb, d.region, (0.0, strength, 0.0))
    overlay_path = out / f"overlay_{image_id}.wten"
    save_tensors(overlay_path, {"image": rgb})

    print(f"{len(dets)} detections -> {det_path}")
    print(f"overlay -> {overlay_path}")
    for d in dets[:10]:
        r = d.region
        print(f"  {class_names[d.class_index]:<12} {d.score:.4f} "
              f"({r.x0},{r.y0},{r.x1},{r.y1})")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    reports = run_suite(instances=cfg.gradcheck_instances, seed=cfg.seed,
                        corrupt=cfg.gradcheck_corrupt or None)
    print(format_gradcheck_report(reports))
    return 0 if all(r.passed for r in reports) else 2


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--variant", choices=("wsddn", "baseline"))
    common.add_argument("--box-score", choices=("on", "off"), dest="box_score")
    common.add_argument("--spatial-reg", choices=("on", "off"), dest="spatial_reg")
    common.add_argument("--multi-view", choices=("on", "off"), dest="multi_view")
    common.add_argument("--ensemble", metavar="CKPT,CKPT,...")
    common.add_argument("--force", action="store_true")

    parser = argparse.ArgumentParser(
        prog="wsddn",
        description="Weakly supervised two-stream shape detector toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common],
                   help="synthesize the shapes dataset")
    sub.add_parser("train", parents=[common], help="fit a model")
    p_eval = sub.add_parser("eval", parents=[common],
                            help="AP on the test split, CorLoc on the train split")
    p_eval.add_argument("checkpoint", nargs="?")
    p_detect = sub.add_parser("detect", parents=[common],
                              help="detections and overlay for one image")
    p_detect.add_argument("checkpoint")
    p_detect.add_argument("image_id")
    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference gradient verification")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = build_run_config(args, extras)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "detect":
            return cmd_detect(cfg, args.checkpoint, args.image_id)
        return cmd_gradcheck(cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
