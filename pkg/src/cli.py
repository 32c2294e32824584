"""
Command-line entry point: `python -m src.cli <command> ...`.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 validation or shape error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from .checkpoint import load_model, save_tensors, save_volume
from .energy import format_published, format_report, profile_model, write_report_csv
from .errors import ConfigError, HalsieError, UsageError
from .evio import parse_events, slice_windows, synth_scene, voxelize
from .models import BinningPolicy, NetworkSpec, SceneConfig, TrainConfig
from .network import SETTINGS, HalsieModel
from .storage import SceneStorage, read_pgm, write_pgm, write_ppm
from .trainer import (
    ConfusionMatrix,
    build_dataset,
    evaluate,
    format_metrics,
    to_model_inputs,
    train,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

IGNORE_ID = 255
BASE_COLORS: Tuple[Tuple[int, int, int], ...] = (
    (128, 128, 128),  # background
    (128, 64, 160),  # street
    (230, 210, 40),  # object
    (40, 170, 60),  # vegetation
    (210, 40, 40),  # person
    (40, 80, 210),  # vehicle
)


class Palette:
    """Injective class id -> RGB map; the ignore id renders black."""

    def __init__(self, classes: int):
        colors: List[Tuple[int, int, int]] = list(BASE_COLORS[:classes])
        k = len(colors)
        seen = set(colors) | {(0, 0, 0)}
        while len(colors) < classes:
            k += 1
            color = ((67 * k) % 256, (151 * k) % 256, (29 * k + 101) % 256)
            if color not in seen:
                colors.append(color)
                seen.add(color)
        self.colors = colors

    def color(self, class_id: int) -> Tuple[int, int, int]:
        if class_id == IGNORE_ID:
            return (0, 0, 0)
        return self.colors[class_id]

    def colorize(self, ids: np.ndarray) -> np.ndarray:
        table = np.zeros((256, 3), dtype=np.uint8)
        table[: len(self.colors)] = self.colors
        table[IGNORE_ID] = (0, 0, 0)
        return table[ids.astype(np.uint8)]


class CliParser(argparse.ArgumentParser):
    """Reports misuse as UsageError (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise UsageError(message)


def load_config(path: Optional[str], model: Type[ModelT]) -> ModelT:
    """Validate a JSON document; missing path means defaults."""
    if path is None:
        return model()
    text = Path(path).read_text(encoding="utf-8")
    try:
        return model.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc.errors()[0]['msg']}") from exc


def _load_frame_and_volume(frame_path: str, events_path: str, bins: int):
    frame = read_pgm(frame_path)
    height, width = frame.shape
    with open(events_path, "r", encoding="utf-8") as f:
        window = parse_events(f, width, height)
    return frame, voxelize(window, bins)


# Commands
def cmd_synth(args) -> int:
    config = load_config(args.config, SceneConfig)
    if args.frames is not None:
        config = config.model_copy(update={"frames": args.frames})
    samples = synth_scene(config, seed=args.seed)
    storage = SceneStorage(args.out)
    storage.store_config(config if args.seed is None else config.model_copy(update={"seed": args.seed}))
    for index, sample in enumerate(samples):
        storage.store_sample(index, sample)
    print(f"Wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_voxelize(args) -> int:
    with open(args.events, "r", encoding="utf-8") as f:
        stream = parse_events(f, args.width, args.height)
    if args.policy is None:
        save_volume(voxelize(stream, args.bins), args.out)
        print(f"Wrote volume of {len(stream)} events to {args.out}")
        return 0
    try:
        policy = BinningPolicy.parse(args.policy)
    except ValueError as exc:
        raise UsageError(f"bad --policy '{args.policy}': {exc}") from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    windows = slice_windows(stream, policy)
    for k, window in enumerate(windows):
        save_volume(voxelize(window, args.bins), out_dir / f"window_{k:05d}.evol")
    print(f"Wrote {len(windows)} volumes to {out_dir}")
    return 0


def _run_training(args, setting: str) -> int:
    spec = load_config(args.spec, NetworkSpec)
    config = load_config(args.config, TrainConfig)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    if args.epochs is not None:
        config = config.model_copy(update={"epochs": args.epochs})
    samples = SceneStorage(args.data).load_all()
    if not samples:
        raise UsageError(f"no samples found in {args.data}")
    dataset = build_dataset(samples, spec.bins)
    model = HalsieModel(spec, setting=setting, seed=config.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    result = train(model, dataset, config, checkpoint_path=out, log_path=log_path)
    last = result.log[-1]
    print("=" * 48)
    print(f"SETTING {setting}: {model.num_params()} parameters")
    print(f"Final loss {last.train_loss:.4f}  accuracy {last.val_accuracy:.4f}  mIoU {last.val_miou:.4f}")
    print(f"Checkpoint: {out}")
    print(f"Log:        {log_path}")
    print("=" * 48)
    return 0


def cmd_train(args) -> int:
    return _run_training(args, args.setting)


def cmd_ablate(args) -> int:
    return _run_training(args, args.ablation)


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    frame, volume = _load_frame_and_volume(args.frame, args.events, model.spec.bins)
    frames, volumes = to_model_inputs(frame[None, None], volume.data[None])
    logits = model.forward(frames, volumes).data
    ids = np.argmax(logits, axis=1)[0].astype(np.uint8)

    out = Path(args.out)
    write_ppm(out, Palette(model.spec.classes).colorize(ids))
    raw_path = Path(args.raw) if args.raw else out.with_suffix(".pgm")
    write_pgm(raw_path, ids)
    logits_path = Path(args.logits) if args.logits else out.with_suffix(".logits")
    save_tensors({"logits": logits[0]}, logits_path)
    print(f"Segmentation: {out} (classes {raw_path}, logits {logits_path})")

    if args.features:
        features = model.mixed_features(frames, volumes).data[0]
        feature_dir = Path(args.features)
        feature_dir.mkdir(parents=True, exist_ok=True)
        for c in range(min(args.feature_maps, features.shape[0])):
            fmap = features[c]
            span = float(fmap.max() - fmap.min())
            scaled = (fmap - fmap.min()) / span * 255.0 if span > 0 else np.zeros_like(fmap)
            write_pgm(feature_dir / f"feature_{c:03d}.pgm", np.round(scaled))
        print(f"Feature maps: {feature_dir}")

    if args.label:
        matrix = ConfusionMatrix(model.spec.classes)
        matrix.update(ids, read_pgm(args.label))
        print(format_metrics(matrix.report()))
    return 0


def cmd_profile(args) -> int:
    if args.published:
        print(format_published())
        return 0
    if args.checkpoint:
        model = load_model(args.checkpoint)
    elif args.spec:
        model = HalsieModel(load_config(args.spec, NetworkSpec), setting=args.setting,
                            seed=args.seed or 0).eval()
    else:
        raise UsageError("profile needs --checkpoint, --spec or --published")
    if not args.samples:
        raise UsageError("profile needs --samples to measure firing rates")
    storage = SceneStorage(args.samples)
    scene = storage.load_all()[: args.limit]
    dataset = build_dataset(scene, model.spec.bins)
    pairs = [to_model_inputs(s.frame[None], s.volume[None]) for s in dataset]
    report = profile_model(model, pairs, sample_set=f"{len(pairs)} samples from {args.samples}")
    print(format_report(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            write_report_csv(report, f)
        print(f"Energy CSV: {args.out}")
    return 0


def _index_key(path: Path) -> str:
    head = path.stem.split("_")[0]
    return head if head.isdigit() else path.stem


def cmd_metrics(args) -> int:
    gt_files: Dict[str, Path] = {}
    for path in sorted(Path(args.gt).glob("*.pgm")):
        if args.gt_suffix and not path.stem.endswith(args.gt_suffix):
            continue
        gt_files[_index_key(path)] = path
    matrix = ConfusionMatrix(args.classes)
    matched = 0
    for path in sorted(Path(args.pred).glob("*.pgm")):
        gt = gt_files.get(_index_key(path))
        if gt is None:
            logger.warning("No ground truth for %s", path.name)
            continue
        matrix.update(read_pgm(path), read_pgm(gt))
        matched += 1
    if matched == 0:
        raise UsageError(f"no prediction in {args.pred} matches a label in {args.gt}")
    report = matrix.report()
    print(format_metrics(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            write_metrics_csv(report, f)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.checkpoint)
    samples = SceneStorage(args.data).load_all()
    if not samples:
        raise UsageError(f"no samples found in {args.data}")
    report = evaluate(model, build_dataset(samples, model.spec.bins))
    print(format_metrics(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            write_metrics_csv(report, f)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    if args.checkpoint:
        os.environ["HALSIE_CHECKPOINT"] = args.checkpoint
    uvicorn.run("src.api:app", host=args.host, port=args.port)
    return 0


# Parser
def _add_training_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="Directory written by `synth`")
    parser.add_argument("--spec", help="NetworkSpec JSON (defaults if omitted)")
    parser.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    parser.add_argument("--out", required=True, help="Checkpoint path")
    parser.add_argument("--log", help="Training log CSV (default <out>.log.csv)")
    parser.add_argument("--epochs", type=int, help="Override the configured epoch count")


def build_parser() -> CliParser:
    parser = CliParser(prog="halsie", description="Hybrid event/frame semantic segmentation pipeline")
    parser.add_argument("--seed", type=int, help="Seed for every random draw of the command")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)

    p = sub.add_parser("synth", help="Generate a synthetic moving-shapes dataset")
    p.add_argument("--config", help="SceneConfig JSON")
    p.add_argument("--frames", type=int, help="Override the frame count")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("voxelize", help="Event CSV to EVOL0001 volume(s)")
    p.add_argument("events")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--policy", help="cit:<ms> or ced:<count>; output becomes a directory")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_voxelize)

    p = sub.add_parser("train", help="Train a model")
    _add_training_args(p)
    p.add_argument("--setting", default="H", choices=SETTINGS)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ablate", help="Train one ablation setting")
    p.add_argument("ablation", choices=SETTINGS)
    _add_training_args(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("infer", help="Segment one frame/event pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", required=True, help="PGM frame")
    p.add_argument("--events", required=True, help="Event CSV")
    p.add_argument("--out", required=True, help="Colorized PPM")
    p.add_argument("--raw", help="Class-id PGM (default <out>.pgm)")
    p.add_argument("--logits", help="Logits tensor file (default <out>.logits)")
    p.add_argument("--label", help="Ground-truth PGM to score against")
    p.add_argument("--features", help="Directory for mixed feature maps")
    p.add_argument("--feature-maps", type=int, default=8)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("profile", help="FLOPs and energy per inference")
    p.add_argument("--checkpoint")
    p.add_argument("--spec", help="Profile an untrained model of this spec")
    p.add_argument("--setting", default="H", choices=SETTINGS)
    p.add_argument("--samples", help="Directory written by `synth`")
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--out", help="Energy CSV")
    p.add_argument("--published", action="store_true", help="Reproduce the published energy table")
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("metrics", help="Score class-id PGMs against labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--gt-suffix", default="label", help="Only label files whose stem ends with this")
    p.add_argument("--out", help="Metrics CSV")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("evaluate", help="Score a checkpoint on a synthetic dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="Metrics CSV")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("serve", help="Run the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=6000)
    p.add_argument("--checkpoint")
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        if getattr(args, "handler", None) is None:
            raise UsageError("missing command")
        return args.handler(args)
    except HalsieError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
