"""Command-line entry point: ``ctxssd {synth,train,eval,profile,viz-attention}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
Settings resolve as command-line flags over the ``--config`` file over defaults,
and every command writes the resolved ``config.txt`` next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .backbones import normalize_images
from .config import RunConfig
from .data import (AnnotationError, generate_synthetic_dataset, read_voc_dataset,
                   write_voc_dataset)
from .detector.model import build_variant
from .evaluation import evaluate
from .experiments import detect
from .nn.checkpoint import CheckpointError
from .nn.tensor import NonFiniteError, Tensor
from .postprocess import profile
from .training import load_training_state, train
from .viz import attention_heatmaps, write_heatmaps

log = logging.getLogger("ctxssd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed", "count": "synth_count", "size_mix": "synth_size_mix", "data": "data_dir",
    "split": "split", "out": "output_dir", "variant": "variant", "backbone": "backbone",
    "width": "width", "steps": "train_steps", "batch_size": "train_batch_size", "lr": "train_lr",
    "optimizer": "train_optimizer", "runs": "profile_runs", "warmup": "profile_warmup",
    "ap_mode": "eval_ap_mode",
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxssd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic shapes dataset in VOC layout"))
    sp.add_argument("--count", type=int)
    sp.add_argument("--size-mix", help="small,medium,large fractions summing to 1")

    sp = common(sub.add_parser("train", help="train a detector variant"))
    sp.add_argument("--data", help="VOC-layout dataset root")
    sp.add_argument("--split")
    sp.add_argument("--variant", choices=("ssd", "f_ssd", "a_ssd", "fa_ssd"))
    sp.add_argument("--backbone", choices=("vgg16", "resnet18", "resnet34", "resnet50"))
    sp.add_argument("--width", type=float, help="channel width multiplier")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--optimizer", choices=("sgd", "adam"))
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = common(sub.add_parser("eval", help="size-stratified mAP of a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split")
    sp.add_argument("--ap-mode", choices=("voc07_11point", "all_point"))

    sp = common(sub.add_parser("profile", help="forward / post-processing time split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--warmup", type=int)

    sp = common(sub.add_parser("viz-attention", help="write attention-mask heatmaps"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--channels", default="0", help="comma-separated mask channels")
    return p


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file (or the one saved beside the checkpoint), then flags."""
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        beside = Path(args.checkpoint).parent / "config.txt"
        path = beside if beside.exists() else None
    try:
        cfg = RunConfig.load(path) if path else RunConfig()
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}", EXIT_DATA) from exc
    except (KeyError, ValueError) as exc:
        raise CliError(f"--config {path}: {exc}", EXIT_USAGE) from exc
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            if dest == "seed" and args.command == "synth":
                key = "synth_seed"
            try:
                cfg.set(key, value)
            except (KeyError, ValueError) as exc:
                raise CliError(f"--{dest.replace('_', '-')}: {exc}", EXIT_USAGE) from exc
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}", EXIT_USAGE)
        k, v = item.split("=", 1)
        try:
            cfg.set(k, v)
        except (KeyError, ValueError) as exc:
            raise CliError(f"--set {item}: {exc}", EXIT_USAGE) from exc
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
    except OSError as exc:
        raise CliError(f"cannot write output directory {out}: {exc}", EXIT_DATA) from exc
    return out


def cmd_synth(cfg: RunConfig) -> Path:
    mix = cfg.synth_size_mix
    if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-6:
        raise CliError(f"--size-mix must be three non-negative fractions summing to 1, got {mix}", EXIT_USAGE)
    out = _prepare_out(cfg)
    ds = generate_synthetic_dataset(cfg.synth_seed, cfg.synth_count, mix)
    try:
        write_voc_dataset(out, ds, cfg.split)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}", EXIT_DATA) from exc
    log.info("wrote %d images to %s", len(ds), out)
    return out


def _load_dataset(cfg: RunConfig):
    if not cfg.data_dir:
        raise CliError("no dataset given (--data or data_dir=)", EXIT_USAGE)
    try:
        return read_voc_dataset(cfg.data_dir, cfg.split)
    except (FileNotFoundError, AnnotationError, OSError) as exc:
        raise CliError(f"cannot read dataset {cfg.data_dir}: {exc}", EXIT_DATA) from exc


def _model_for(cfg: RunConfig, num_classes: int):
    try:
        spec = cfg.variant_spec(num_classes)
        return build_variant(spec, np.random.default_rng(cfg.seed))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _load_model(cfg: RunConfig, checkpoint, num_classes: int):
    if not Path(checkpoint).is_file():
        raise CliError(f"checkpoint not found: {checkpoint}", EXIT_DATA)
    model = _model_for(cfg, num_classes)
    try:
        load_training_state(checkpoint, model)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"checkpoint {checkpoint} does not fit the configured model: {exc}", EXIT_DATA) from exc
    model.eval()
    return model


def cmd_train(cfg: RunConfig, resume=None) -> Path:
    ds = _load_dataset(cfg)
    if cfg.num_classes == 0:
        cfg.num_classes = len(ds.class_names) + 1
    model = _model_for(cfg, cfg.num_classes)
    out = _prepare_out(cfg)
    if resume is not None and not Path(resume).is_file():
        raise CliError(f"checkpoint not found: {resume}", EXIT_DATA)

    def report(step, total):
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, total)

    try:
        train(model, ds, cfg.train_settings(), out, resume=resume, callback=report)
    except (CheckpointError, KeyError) as exc:
        raise CliError(f"cannot resume from {resume}: {exc}", EXIT_DATA) from exc
    return out / "checkpoint.bin"


def detect_dataset(model, ds, cfg: RunConfig, batch: int = 4) -> dict:
    return detect(model, ds, cfg.postprocess_params(), batch)


def cmd_eval(cfg: RunConfig, checkpoint=None, detector=None):
    """Evaluate a checkpoint; ``detector(dataset) -> {image_id: [Detection]}`` replaces the model."""
    ds = _load_dataset(cfg)
    if detector is None:
        model = _load_model(cfg, checkpoint, cfg.num_classes or len(ds.class_names) + 1)
        dets = detect_dataset(model, ds, cfg)
    else:
        dets = detector(ds)
    gts = {s.image_id: s.objects for s in ds.samples}
    report = evaluate(dets, gts, ds.class_names, cfg.eval_iou_threshold, cfg.eval_ap_mode)
    out = _prepare_out(cfg)
    (out / "eval_table.txt").write_text(report.to_table())
    (out / "eval.txt").write_text(report.to_records())
    return report


def cmd_profile(cfg: RunConfig, checkpoint):
    if cfg.data_dir:
        ds = _load_dataset(cfg)
        n_cls = cfg.num_classes or len(ds.class_names) + 1
        images = np.stack([s.image for s in ds.samples[: cfg.profile_batch]])
    else:
        n_cls = cfg.num_classes or 21
        images = generate_synthetic_dataset(cfg.seed, cfg.profile_batch).samples
        images = np.stack([s.image for s in images])
    model = _load_model(cfg, checkpoint, n_cls)
    report = profile(model, Tensor(normalize_images(images)), cfg.profile_warmup, cfg.profile_runs,
                     cfg.postprocess_params(), label=cfg.variant)
    out = _prepare_out(cfg)
    (out / "timing_table.txt").write_text(report.to_table())
    (out / "timing.txt").write_text(report.to_records())
    return report


def cmd_viz_attention(cfg: RunConfig, checkpoint, image, channels=(0,)) -> list:
    from PIL import Image

    if cfg.variant not in ("a_ssd", "fa_ssd"):
        raise CliError(f"variant {cfg.variant!r} has no attention modules; use a_ssd or fa_ssd", EXIT_USAGE)
    try:
        img = np.asarray(Image.open(image).convert("RGB"))
    except OSError as exc:
        raise CliError(f"cannot read image {image}: {exc}", EXIT_DATA) from exc
    model = _load_model(cfg, checkpoint, cfg.num_classes or 21)
    try:
        maps = attention_heatmaps(model, img, channels)
    except IndexError as exc:
        raise CliError(f"--channels: {exc}", EXIT_USAGE) from exc
    out = _prepare_out(cfg)
    return write_heatmaps(maps, out)


def _parse_channels(text: str) -> tuple:
    try:
        chans = tuple(int(c) for c in text.split(",") if c.strip())
    except ValueError as exc:
        raise CliError(f"--channels: expected comma-separated integers, got {text!r}", EXIT_USAGE) from exc
    if not chans:
        raise CliError("--channels: at least one channel is required", EXIT_USAGE)
    return chans


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    cfg = resolve_config(args)
    if args.command == "synth":
        print(cmd_synth(cfg))
    elif args.command == "train":
        print(cmd_train(cfg, args.resume))
    elif args.command == "eval":
        print(cmd_eval(cfg, args.checkpoint).to_table(), end="")
    elif args.command == "profile":
        print(cmd_profile(cfg, args.checkpoint).to_table(), end="")
    elif args.command == "viz-attention":
        for path in cmd_viz_attention(cfg, args.checkpoint, args.image, _parse_channels(args.channels)):
            print(path)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, AnnotationError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, FloatingPointError, NonFiniteError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
