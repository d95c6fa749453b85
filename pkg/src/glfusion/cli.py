"""Command-line entry point: ``glfusion {gen-toy,train,eval,detect,robustness}``.

Configuration is a flat YAML mapping of the keys in ``DEFAULTS``. Precedence,
lowest to highest: built-in defaults, ``--config`` file, ``--set key=value``
overrides, then the dedicated flags (``--seed``, ``--workers``, ``--epochs``).
Every command that writes files also writes ``effective_config.yaml`` (the
merged result) into ``--output-dir``.

Exit status is 0 on success, 2 on usage or config errors and 1 on runtime
failures. Failures print one JSON line ``{"error": ..., "message": ...}`` to
stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import torch
import yaml

from . import __version__
from .affm import FusionConfig
from .backbone import BackboneConfig
from .core import load_image
from .dataset import AugmentationConfig, ToyGenConfig, generate_toy_dataset
from .detector import Detector, DetectorConfig, load_checkpoint, save_checkpoint
from .evaluator import RobustnessSweepConfig, evaluate, robustness_sweep, write_curves
from .trainer import TrainConfig, train

log = logging.getLogger("glfusion")

DEFAULTS = {
    "seed": 0,
    "workers": os.cpu_count() or 1,
    # model
    "architecture": "resnet50",
    "pretrained": True,
    "shared_local_weights": False,
    "iou_threshold": 0.25,
    "residual_norm": False,
    "pooling": "flatten",
    "scale_dim": "head",
    # training
    "epochs": 1,
    "batch_size": 64,
    "lr": 1e-4,
    "aug_fraction": 0.1,
    "blur_sigma_max": 3.0,
    "jpeg_quality_min": 30,
    "jpeg_quality_max": 100,
    # evaluation
    "eval_batch_size": 32,
    "blur_sigmas": [0.0, 1.0, 2.0, 3.0],
    "jpeg_qualities": [100, 90, 70, 50, 30],
    # toy corpus
    "toy_n_train": 2000,
    "toy_n_test": 500,
    "toy_image_size": 224,
    "toy_artifact_size": 16,
    "toy_checker_cell": 8,
}

COMMANDS = ("gen-toy", "train", "eval", "detect", "robustness")


class UsageError(Exception):
    pass


def _coerce(key: str, value):
    want = DEFAULTS[key]
    if isinstance(want, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(want, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(want, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(want, list):
        if not isinstance(value, list):
            value = [value]
        return [_coerce_item(key, v, type(want[0])) for v in value]
    if not isinstance(value, str):
        raise UsageError(f"{key} expects a string, got {value!r}")
    return value


def _coerce_item(key, v, kind):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise UsageError(f"{key} expects numbers, got {v!r}")
    if kind is int and v != int(v):
        raise UsageError(f"{key} expects integers, got {v!r}")
    return kind(v)


def _merge(cfg: dict, updates: dict, origin: str) -> None:
    for key, value in updates.items():
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r} in {origin}")
        cfg[key] = _coerce(key, value)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must be a flat key: value mapping")
        _merge(cfg, loaded, args.config)
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(raw)
    _merge(cfg, overrides, "--set")
    for key in ("seed", "workers", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value)
    if cfg["workers"] < 1:
        raise UsageError("workers must be >= 1")
    return cfg


def detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig(
        backbone=BackboneConfig(
            architecture=cfg["architecture"],
            pretrained=cfg["pretrained"],
            shared_local_weights=cfg["shared_local_weights"],
        ),
        iou_threshold=cfg["iou_threshold"],
        fusion=FusionConfig(pooling=cfg["pooling"], residual_norm=cfg["residual_norm"], scale_dim=cfg["scale_dim"]),
        seed=cfg["seed"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"],
        base_lr=cfg["lr"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        augmentation=AugmentationConfig(
            apply_fraction=cfg["aug_fraction"],
            blur_sigma_max=cfg["blur_sigma_max"],
            jpeg_quality_range=(cfg["jpeg_quality_min"], cfg["jpeg_quality_max"]),
        ),
        workers=cfg["workers"],
    )


def write_effective_config(cfg: dict, out_dir: Path, extra: Optional[dict] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = dict(cfg)
    if extra:
        snapshot.update(extra)
    path = out_dir / "effective_config.yaml"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(snapshot, fh, sort_keys=True)
    return path


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"{args.command} requires --{name.replace('_', '-')}")


# -- commands ------------------------------------------------------------------


def cmd_gen_toy(args, cfg) -> dict:
    _require(args, "output_dir")
    out = Path(args.output_dir)
    write_effective_config(cfg, out)
    result = {}
    for split, n, seed in (("train", cfg["toy_n_train"], cfg["seed"]), ("test", cfg["toy_n_test"], cfg["seed"] + 1)):
        toy = ToyGenConfig(
            image_size=cfg["toy_image_size"],
            artifact_size=cfg["toy_artifact_size"],
            n_real=n // 2,
            n_fake=n - n // 2,
            seed=seed,
            checker_cell=cfg["toy_checker_cell"],
        )
        result[split] = str(generate_toy_dataset(toy, out / split))
    return result


def cmd_train(args, cfg) -> dict:
    _require(args, "manifest", "output_dir")
    out = Path(args.output_dir)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        extra = {"init_checkpoint": str(args.checkpoint)}
    else:
        model = Detector(detector_config(cfg))
        extra = {}
    write_effective_config(cfg, out, extra)
    torch.manual_seed(cfg["seed"])
    model, records = train(model, args.manifest, train_config(cfg), out_dir=out, val_manifest=args.val_manifest)
    final = save_checkpoint(model, out / "model.ckpt", extra={"epochs": cfg["epochs"]})
    last = [r for r in records if r.kind == "epoch"][-1]
    return {"checkpoint": str(final), "train_accuracy": last.train_accuracy, "loss": last.loss, "val_ap": last.val_ap}


def _load_model(args):
    _require(args, "checkpoint")
    return load_checkpoint(args.checkpoint).eval()


def cmd_eval(args, cfg) -> dict:
    _require(args, "manifest", "output_dir")
    model = _load_model(args)
    out = Path(args.output_dir)
    write_effective_config(cfg, out, {"checkpoint": str(args.checkpoint)})
    report = evaluate(model, args.manifest, out_dir=out, batch_size=cfg["eval_batch_size"], workers=cfg["workers"])
    return {"global_ap": report.global_ap, "total_map": report.total_map, "report": str(out / "report.json")}


def cmd_detect(args, cfg) -> dict:
    _require(args, "image")
    model = _load_model(args)
    score, props = model.detect(load_image(args.image))
    record = {"path": str(args.image), "fake_probability": score, "crop_rects": [list(p.crop_rect) for p in props]}
    if args.output_dir:
        out = Path(args.output_dir)
        write_effective_config(cfg, out, {"checkpoint": str(args.checkpoint)})
        with open(out / "detection.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh)
            fh.write("\n")
    return record


def cmd_robustness(args, cfg) -> dict:
    _require(args, "manifest", "output_dir")
    model = _load_model(args)
    out = Path(args.output_dir)
    write_effective_config(cfg, out, {"checkpoint": str(args.checkpoint)})
    sweep = RobustnessSweepConfig(blur_sigmas=tuple(cfg["blur_sigmas"]), jpeg_qualities=tuple(cfg["jpeg_qualities"]))
    curves = robustness_sweep(model, args.manifest, sweep, batch_size=cfg["eval_batch_size"], workers=cfg["workers"])
    paths = write_curves(curves, out)
    return {"curves": [str(p) for p in paths], **{k: [list(pt) for pt in v] for k, v in curves.items()}}


HANDLERS = {
    "gen-toy": cmd_gen_toy,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "robustness": cmd_robustness,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML file of config keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="data loading threads (default: all cores)")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="glfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    sub.add_parser("gen-toy", parents=[common], help="write the procedural train/test corpus")
    p = sub.add_parser("train", parents=[common], help="train a detector on a manifest")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--checkpoint", help="initialise from this checkpoint")
    p.add_argument("--epochs", type=int)
    for name, text in (("eval", "score a manifest and write a report"), ("robustness", "blur/JPEG sweep over a manifest")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
    p = sub.add_parser("detect", parents=[common], help="score one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - reported as a parsable line
        log.debug("command failed", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
