"""Command-line entry point: ``decompseg <command> [flags]``.

Every command accepts ``--config FILE`` (JSON). File values act as defaults
and explicit flags win. The fully resolved configuration is written to
``resolved_config.json`` in the output directory, and passing that file back
with ``--config`` repeats the run. Output directories default to
``$DECOMPSEG_OUTPUT_ROOT/<command>`` (``./runs/<command>`` when unset).

Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from decompseg import __version__
from decompseg.errors import ConfigurationError, DimensionError, InputError, LoadError, NumericError, \
    ResourceError, SpecMismatchError
from decompseg.models import BACKGROUND_PRIOR

OUTPUT_ROOT_ENV = "DECOMPSEG_OUTPUT_ROOT"
CONFIG_NAME = "resolved_config.json"
RUNTIME_ERRORS = (ConfigurationError, DimensionError, InputError, LoadError, NumericError, ResourceError,
                  SpecMismatchError, OSError)

log = logging.getLogger("decompseg")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it in the error message."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# argument parsing


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _ratio(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option values; flags override it")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="cpu")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p: argparse.ArgumentParser, batch_size: int) -> None:
    p.add_argument("--train", type=Path, help="training manifest (required)")
    p.add_argument("--val", type=Path, help="validation manifest")
    p.add_argument("--epochs", type=_positive_int, default=10)
    p.add_argument("--batch-size", type=_positive_int, default=batch_size)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--betas", type=float, nargs=2, default=(0.9, 0.999))
    p.add_argument("--max-steps", type=_positive_int)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decompseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("derive-data", help="build a binary tagged dataset from two image folders")
    _add_common(p)
    p.add_argument("--pos", type=Path, help="folder of images showing the class (required)")
    p.add_argument("--neg", type=Path, help="folder of images without it (required)")
    p.add_argument("--n", type=_positive_int, help="images drawn from each folder (required)")
    p.add_argument("--n-neg", type=_positive_int, help="negatives, when different from --n")
    p.add_argument("--size", type=_positive_int, default=224)
    p.add_argument("--split", type=_ratio, default=0.8)
    p.set_defaults(required=("pos", "neg", "n"))

    p = sub.add_parser("gen-synth", help="render a synthetic shapes dataset with ground-truth masks")
    _add_common(p)
    p.add_argument("--n", type=_positive_int, help="number of images (required)")
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--classes", type=_positive_int, default=1, help="foreground classes")
    p.add_argument("--presence", type=float, default=0.5)
    p.add_argument("--shape-size", type=float, nargs=2, metavar=("LO", "HI"), default=(0.45, 0.8))
    p.add_argument("--split", type=_ratio, default=0.8)
    p.set_defaults(required=("n",))

    p = sub.add_parser("train-classifier", help="train the tag classifier used for guidance")
    _add_common(p)
    _add_training(p, batch_size=32)
    p.add_argument("--width", type=_positive_int, default=64, help="stem width of the ResNet-18")
    p.add_argument("--pretrained", action="store_true", help="start from ImageNet weights")
    p.set_defaults(required=("train",))

    p = sub.add_parser("train", help="joint training of mask and decomposition networks")
    _add_common(p)
    _add_training(p, batch_size=4)
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--classifier", type=Path, help="checkpoint written by train-classifier")
    p.add_argument("--lambda-m", type=float, default=1e-3)
    p.add_argument("--lambda-c", type=float, default=1e-3)
    p.add_argument("--background-prior", type=float, default=BACKGROUND_PRIOR,
                   help="initial mask-head logit margin for background (0 = uniform masks)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(required=("train",))

    p = sub.add_parser("eval", help="metrics report and overlay figures for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (required)")
    p.add_argument("--manifest", type=Path, help="manifest to evaluate (required)")
    p.add_argument("--run-id", default="run")
    p.add_argument("--n-figure", type=_positive_int, default=50)
    p.add_argument("--fp-threshold", type=float, default=0.01)
    p.set_defaults(required=("checkpoint", "manifest"))

    p = sub.add_parser("predict", help="label map and overlay for one image")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (required)")
    p.add_argument("--image", type=Path, help="input image (required)")
    p.set_defaults(required=("checkpoint", "image"))

    p = sub.add_parser("check-arch", help="print per-layer parameter counts and compare with the reference")
    _add_common(p)
    p.add_argument("--scale", choices=("desk", "paper"), default="paper")
    p.add_argument("--classes", type=_positive_int, default=1, help="foreground classes")
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--json", action="store_true", help="print the table as JSON")
    p.set_defaults(required=())
    return parser


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def _load_config(path: Path, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a JSON object")
    if "args" in data:  # a resolved config written by an earlier run
        if data.get("command") not in (None, command):
            raise InputError(f"config {path} was written by {data['command']!r}, not {command!r}")
        return data["args"]
    section = data.get(command, {})
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    return {**flat, **section}


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags on top of config-file values; missing required options are usage errors."""
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config is not None:
        try:
            values = _load_config(args.config, args.command)
        except InputError as exc:
            sub.error(str(exc))
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(known) - {"command", "config"})
        if unknown:
            sub.error(f"unknown options in config: {', '.join(unknown)}")
        defaults = {}
        for key, value in values.items():
            action = known.get(key)
            if action is None:
                continue
            if action.type is not None and value is not None and not isinstance(value, list):
                try:
                    value = action.type(str(value)) if action.type is not float else float(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    sub.error(f"config option {key}: {exc}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [f"--{name.replace('_', '-')}" for name in args.required if getattr(args, name) is None]
    if missing:
        sub.error(f"missing required option(s): {' '.join(missing)}")
    if args.out is None:
        args.out = output_root() / args.command
    return args


def resolved_config(args: argparse.Namespace, **extra) -> dict:
    skip = {"command", "config", "required", "verbose"}
    return {
        "command": args.command,
        "version": __version__,
        "args": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in skip},
        **extra,
    }


def write_config(args: argparse.Namespace, out: Path, **extra) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_NAME
    path.write_text(json.dumps(resolved_config(args, **extra), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _load_manifest(path: Path, stage: str):
    from decompseg.data import DatasetManifest

    if not Path(path).exists():
        raise StageError(stage, f"manifest {path} does not exist")
    return DatasetManifest.load(path)


def cmd_derive_data(args) -> int:
    from decompseg.data import derive_tagged_dataset

    write_config(args, args.out)
    train, val = derive_tagged_dataset(args.pos, args.neg, args.n, args.n_neg or args.n, (args.size, args.size),
                                       args.split, args.seed, args.out)
    print(f"train {len(train)} images -> {args.out / 'train.jsonl'}")
    print(f"val {len(val)} images -> {args.out / 'val.jsonl'}")
    return 0


def cmd_gen_synth(args) -> int:
    from decompseg.data import SyntheticSceneParams, generate_synthetic, split_manifest

    params = SyntheticSceneParams(canvas_size=(args.size, args.size), num_foreground_classes=args.classes,
                                  foreground_presence_probability=args.presence,
                                  size_range=tuple(args.shape_size))
    write_config(args, args.out, scene_params=asdict(params))
    everything = generate_synthetic(params, args.n, args.seed, args.out)
    train, val = split_manifest(everything, args.split, args.seed)
    train.save(args.out / "train.jsonl")
    val.save(args.out / "val.jsonl")
    print(f"{len(everything)} images ({len(train)} train, {len(val)} val) -> {args.out}")
    return 0


def _train_config(args, stage: str, **kw):
    from decompseg.training import TrainConfig

    return TrainConfig(stage=stage, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       adam_betas=tuple(args.betas), seed=args.seed, checkpoint_dir=str(args.out),
                       device=args.device, deterministic=args.deterministic, max_steps=args.max_steps, **kw)


def cmd_train_classifier(args) -> int:
    from decompseg.models import build_classifier
    from decompseg.training import RunLog, seed_everything, tag_accuracy, train_classifier

    train = _load_manifest(args.train, "train-classifier")
    val = _load_manifest(args.val, "train-classifier") if args.val else None
    cfg = _train_config(args, "classifier")
    write_config(args, args.out, train_config=cfg.to_dict())
    seed_everything(cfg.seed, cfg.deterministic)
    g = build_classifier(train.num_classes, pretrained=args.pretrained, width=args.width)
    g, _ = train_classifier(g, train, cfg, val, RunLog(args.out / "runlog.jsonl"))
    if val is not None:
        print(f"validation tag accuracy {tag_accuracy(g, val, device=cfg.device):.4f}")
    print(f"classifier checkpoint -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from decompseg.models import build_segmenter, load_classifier, read_manifest, spec_for_scale
    from decompseg.training import RunLog, resume, train_joint

    train = _load_manifest(args.train, "train")
    val = _load_manifest(args.val, "train") if args.val else None
    cfg = _train_config(args, "joint", lambda_m=args.lambda_m, lambda_c=args.lambda_c,
                        eval_every=args.eval_every, checkpoint_every=args.checkpoint_every)
    spec = spec_for_scale(args.scale, train.num_classes, train.image_size[0])
    if train.image_size[0] != train.image_size[1]:
        raise StageError("train", f"square images expected, manifest has {train.image_size}")

    g = None
    if args.classifier is not None:
        if not (Path(args.classifier) / "manifest.json").exists():
            raise StageError("train", f"no classifier checkpoint at {args.classifier}; "
                                      "train-classifier must run first")
        if "classifier" not in read_manifest(args.classifier):
            raise StageError("train", f"{args.classifier} holds no classifier; train-classifier must run first")
        g = load_classifier(args.classifier)
    elif cfg.lambda_c and args.resume is None:
        raise StageError("train", "train-classifier must run first (pass --classifier, or --lambda-c 0)")

    write_config(args, args.out, train_config=cfg.to_dict(), model_spec=spec.to_dict())
    runlog_path = args.out / "runlog.jsonl"
    if args.resume is not None:
        runlog = RunLog.load(runlog_path) if runlog_path.exists() else RunLog()
        runlog.path = runlog_path
        state = resume(args.resume, cfg, spec, runlog)
        if g is None and state.classifier is None and cfg.lambda_c:
            raise StageError("train", "train-classifier must run first: the checkpoint holds no classifier")
        seg, runlog = train_joint(state.seg, g, train, cfg, val, state=state, runlog=runlog)
    else:
        runlog_path.unlink(missing_ok=True)
        torch.manual_seed(cfg.seed)
        seg = build_segmenter(spec, cfg.device, background_prior=args.background_prior)
        seg, runlog = train_joint(seg, g, train, cfg, val, runlog=RunLog(runlog_path))
    summaries = [r for r in runlog.records if r.get("kind") == "epoch"]
    if summaries:
        print(json.dumps(summaries[-1], sort_keys=True))
    print(f"checkpoints -> {args.out / 'last'}")
    return 0


def cmd_eval(args) -> int:
    from decompseg.evaluation import evaluate_run, format_report

    manifest = _load_manifest(args.manifest, "eval")
    if not (Path(args.checkpoint) / "manifest.json").exists():
        raise StageError("eval", f"no checkpoint at {args.checkpoint}")
    write_config(args, args.out)
    report = evaluate_run(args.checkpoint, manifest, args.out, run_id=args.run_id, seed=args.seed,
                          n_figure=args.n_figure, fp_threshold=args.fp_threshold, device=args.device)
    print(format_report(report))
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    from decompseg.data import load_image, to_uint8
    from decompseg.evaluation import overlay, predict_mask
    from decompseg.models import load_segmenter

    if not Path(args.image).exists():
        raise StageError("predict", f"image {args.image} does not exist")
    seg = load_segmenter(args.checkpoint).to(args.device)
    _, h, w = seg.spec.input_size
    image = load_image(args.image, (h, w))
    labels, _ = predict_mask(seg.f_m, torch.from_numpy(image.transpose(2, 0, 1))[None].to(args.device))
    labels = labels[0].cpu().numpy().astype(np.uint8)
    k = seg.spec.num_classes
    write_config(args, args.out)
    stem = Path(args.image).stem
    Image.fromarray(labels, mode="L").save(args.out / f"{stem}_labels.png")
    blended = overlay(image, labels, k)
    Image.fromarray(to_uint8(blended)).save(args.out / f"{stem}_overlay.png")
    areas = {f"class_{c}": float((labels == c).mean()) for c in range(k)}
    print(json.dumps({"image": str(args.image), "areas": areas}, sort_keys=True))
    return 0


def cmd_check_arch(args) -> int:
    from decompseg.models import build_segmenter, format_table, layer_table, paper_table_diff, \
        parameter_summary, spec_for_scale

    k = args.classes + 1
    spec = spec_for_scale(args.scale, k, args.size)
    seg = build_segmenter(spec, device="meta")
    rows = layer_table(seg)
    summary = parameter_summary(seg)
    reference = k == 2 and spec.input_size == (3, 224, 224)
    problems = paper_table_diff(seg) if reference else []
    if args.json:
        print(json.dumps({"rows": rows, "summary": summary, "reference_diff": problems}, default=list))
    else:
        print(format_table(rows))
        print()
        for part, count in summary.items():
            print(f"{part:<13}{count:>12,}")
        print()
        if not reference:
            print("reference tables cover K=2 at 224x224 only; no comparison made")
        elif problems:
            print("MISMATCH against reference tables:")
            print("\n".join(f"  {p}" for p in problems))
        else:
            print("all layers match the reference tables")
    return 1 if problems else 0


COMMANDS = {
    "derive-data": cmd_derive_data,
    "gen-synth": cmd_gen_synth,
    "train-classifier": cmd_train_classifier,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "check-arch": cmd_check_arch,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error in {exc}", file=sys.stderr)
    except RUNTIME_ERRORS as exc:
        print(f"error in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
