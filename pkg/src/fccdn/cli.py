"""Command line entry point: ``fccdn {prepare,synth,train,eval,predict}``.

Configuration precedence is CLI flag > config file > default. Every command
that writes a run directory echoes its resolved configuration there as
``config.json``; passing that file back through ``--config`` reruns it.

Environment: ``FCCDN_OUTPUT_ROOT`` prefixes relative output paths.
"""
import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .data import (
    SPLITS,
    AugmentationConfig,
    ChannelStats,
    DatasetManifest,
    ManifestEntry,
    PairDataset,
    assign_splits,
    compute_stats,
    crop_dataset,
    gen_synthetic,
    load_pairs,
    write_pairs,
)
from .exceptions import FCCDNError
from .inference import evaluate_segmentation, predict_manifest
from .network import NetworkConfig, build_model
from .training import Trainer, TrainConfig, model_from_checkpoint, seed_everything, validate

log = logging.getLogger("fccdn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    pass


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get("FCCDN_OUTPUT_ROOT")
    return p if p.is_absolute() or not root else Path(root) / p


def parse_ratio(text: str) -> List[float]:
    try:
        parts = [float(v) for v in text.split(":")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid split ratio {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split ratio needs three parts, e.g. 7:1:2")
    return parts


class _ConfigLoader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-3" as a string; accept exponent floats without a dot.
_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$|^[-+]?[0-9][0-9_]*\.[0-9_]*$"),
    list("-+0123456789."),
)


def read_config_file(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    data = (json.loads(text) if Path(path).suffix == ".json" else yaml.load(text, Loader=_ConfigLoader)) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a mapping")
    return data


def resolve(section: dict, flags: dict) -> dict:
    """Config-file section overlaid with the flags that were actually given."""
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _flat_config(args) -> dict:
    """Resolved flags of a single-section command, re-loadable through ``--config``."""
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def echo_config(run_dir: Path, config: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- prepare

def _scan_triples(src: Path) -> List[ManifestEntry]:
    """Entries for an ``A/``, ``B/``, ``label/`` layout with matching file names."""
    a_dir, b_dir, l_dir = src / "A", src / "B", src / "label"
    if not a_dir.is_dir():
        return []
    entries, problems = [], []
    for f in sorted(a_dir.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        b, lab = b_dir / f.name, l_dir / f.name
        missing = [str(p) for p in (b, lab) if not p.exists()]
        if missing:
            problems.append(f"{f.name}: missing {', '.join(missing)}")
            continue
        entries.append(ManifestEntry(f.stem, str(f), str(b), str(lab)))
    if problems:
        raise UsageError("incomplete image triples:\n  " + "\n  ".join(problems))
    return entries


def _check_sizes(manifest: DatasetManifest, size: int) -> None:
    from PIL import Image

    problems = []
    for e in manifest.entries:
        dims = []
        for p in (e.t1, e.t2, e.label):
            with Image.open(manifest.root / p) as im:
                dims.append(im.size)
        if len(set(dims)) != 1:
            problems.append(f"{e.id}: t1/t2/label sizes differ {dims}")
        elif min(dims[0]) < size:
            problems.append(f"{e.id}: image {dims[0]} smaller than crop size {size}")
    if problems:
        raise UsageError("invalid source images:\n  " + "\n  ".join(problems))


def cmd_prepare(args) -> int:
    src = Path(args.src)
    out = output_path(args.out)
    predefined = {s: _scan_triples(src / s) for s in SPLITS if (src / s).is_dir()}
    if predefined:
        entries = []
        for split, es in predefined.items():
            for e in es:
                e.id, e.split = f"{split}_{e.id}", split
            entries += es
    else:
        entries = _scan_triples(src)
    if not entries:
        raise UsageError(f"no image triples found under {src} (expected A/, B/, label/)")
    entries = [ManifestEntry(e.id, os.path.relpath(e.t1, out), os.path.relpath(e.t2, out),
                             os.path.relpath(e.label, out), e.split) for e in entries]
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(entries, out)
    _check_sizes(manifest, args.size)
    tiled = crop_dataset(manifest, args.size, args.overlap)
    if not predefined:
        splits = assign_splits([e.id for e in tiled.entries], args.split, args.seed)
        for e in tiled.entries:
            e.split = splits[e.id]
    tiled.check_disjoint()
    tiled.save(out / "manifest.jsonl")
    train = tiled.split("train")
    if len(train):
        compute_stats(load_pairs(train)).save(out / "stats.txt")
    echo_config(out, _flat_config(args))
    counts = {s: len(tiled.split(s)) for s in SPLITS}
    print(json.dumps({"tiles": len(tiled), **counts}))
    return EXIT_OK


# --------------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    if args.size % 16:
        raise UsageError(f"--size {args.size} is not divisible by 16")
    out = output_path(args.out)
    pairs = gen_synthetic(args.n, args.size, args.seed)
    splits = assign_splits([p.id for p in pairs], args.split, args.seed) if pairs else {}
    manifest = write_pairs(pairs, out, splits)
    train = [p for p in pairs if splits.get(p.id) == "train"]
    if train:
        compute_stats(train).save(out / "stats.txt")
    echo_config(out, _flat_config(args))
    print(json.dumps({"pairs": len(manifest), **{s: len(manifest.split(s)) for s in SPLITS}}))
    return EXIT_OK


# --------------------------------------------------------------------------- train

NETWORK_FLAGS = {
    "backbone": "backbone", "width_multiplier": "width_multiplier", "nl_fpn": "use_nl_fpn",
    "dfm": "use_dfm", "ssl_heads": "use_ssl_heads", "num_seg_classes": "num_seg_classes",
    "stage_depths": "stage_depths",
}
TRAIN_FLAGS = {
    "lr": "learning_rate", "weight_decay": "weight_decay", "batch_size": "batch_size",
    "patience": "plateau_patience_epochs", "factor": "plateau_factor",
    "validation_start_epoch": "validation_start_epoch", "variant": "loss_variant", "seed": "seed",
    "max_epochs": "max_epochs", "max_steps": "max_steps", "aux_warmup_steps": "aux_warmup_steps",
}


def _stats_for(manifest_path: Path, stats_arg) -> ChannelStats:
    path = Path(stats_arg) if stats_arg else manifest_path.parent / "stats.txt"
    if not path.exists():
        raise UsageError(f"normalisation stats not found at {path}")
    return ChannelStats.load(path)


def resolve_train_config(args) -> dict:
    file_cfg = read_config_file(args.config)
    data = resolve(file_cfg.get("data", {}), {
        "manifest": args.manifest, "stats": args.stats,
        "run_dir": str(output_path(args.run_dir)) if args.run_dir else None,
    })
    if not data.get("manifest") or not data.get("run_dir"):
        raise UsageError("train needs --manifest and --run-dir (or a config file providing them)")
    net_flags = {v: getattr(args, k) for k, v in NETWORK_FLAGS.items()}
    network = NetworkConfig(**resolve(file_cfg.get("network", {}), net_flags)).to_dict()
    train = TrainConfig(**resolve(file_cfg.get("train", {}), {v: getattr(args, k) for k, v in TRAIN_FLAGS.items()}))
    aug_section = dict(file_cfg.get("augmentation", {}))
    if args.no_augment:
        aug_section["enabled"] = False
    enabled = aug_section.pop("enabled", True)
    aug_section.setdefault("rng_seed", train.seed)
    augmentation = dict(AugmentationConfig(**aug_section).to_dict(), enabled=enabled)
    return {"command": "train", "data": data, "network": network, "train": train.to_dict(),
            "augmentation": augmentation}


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    run_dir = Path(cfg["data"]["run_dir"])
    echo_config(run_dir, cfg)
    manifest_path = Path(cfg["data"]["manifest"])
    manifest = DatasetManifest.load(manifest_path)
    stats = _stats_for(manifest_path, cfg["data"].get("stats"))
    stats.save(run_dir / "stats.txt")
    train_cfg = TrainConfig(**cfg["train"])
    seed_everything(train_cfg.seed)
    aug = dict(cfg["augmentation"])
    aug = AugmentationConfig(**aug) if aug.pop("enabled") else None
    train_pairs = load_pairs(manifest.split("train"))
    val_pairs = load_pairs(manifest.split("validation"))
    if not train_pairs:
        raise UsageError("manifest has no training entries")
    if not val_pairs:
        raise UsageError("manifest has no validation entries")
    model = build_model(NetworkConfig.from_dict(cfg["network"]), train_cfg.seed)
    trainer = Trainer(model, train_cfg, PairDataset(train_pairs, stats, aug, train_cfg.seed),
                      PairDataset(val_pairs, stats), run_dir=run_dir)
    state = trainer.fit()
    print(json.dumps({"epoch": state.epoch, "step": state.step, "best_val_f1": state.best_val_f1,
                      "best_epoch": state.best_epoch, "lr": state.current_lr}))
    return EXIT_OK


# --------------------------------------------------------------------------- eval / predict

def _checkpoint_stats(ckpt: Path, stats_arg) -> ChannelStats:
    path = Path(stats_arg) if stats_arg else ckpt.parent / "stats.txt"
    if not path.exists():
        raise UsageError(f"normalisation stats not found at {path}")
    return ChannelStats.load(path)


def _select(manifest: DatasetManifest, split: Optional[str]) -> DatasetManifest:
    return manifest if split in (None, "all") else manifest.split(split)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    model, _ = model_from_checkpoint(ckpt)
    stats = _checkpoint_stats(ckpt, args.stats)
    manifest = _select(DatasetManifest.load(args.manifest), args.split)
    if not len(manifest):
        raise UsageError(f"split {args.split!r} is empty")
    pairs = load_pairs(manifest)
    report = {"change": validate(model, PairDataset(pairs, stats), args.batch_size).as_dict()}
    if model.cfg.use_ssl_heads and model.cfg.num_seg_classes == 1 and all(p.seg1 is not None for p in pairs):
        report["segmentation"] = evaluate_segmentation(model, pairs, stats).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    model, _ = model_from_checkpoint(ckpt)
    stats = _checkpoint_stats(ckpt, args.stats)
    manifest = _select(DatasetManifest.load(args.manifest), args.split)
    out = output_path(args.out)
    echo_config(out, _flat_config(args))
    report = predict_manifest(model, manifest, stats, out, render_errors=args.render_errors,
                              tile=args.tile, overlap=args.overlap)
    if report is not None:
        text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
        (out / "metrics.json").write_text(text + "\n")
        print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _bool_flag(p, name: str, help: str) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help)
    g.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fccdn", description="Siamese change detection: data preparation, training, evaluation and prediction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = parser.commands = {}

    p = commands["prepare"] = sub.add_parser("prepare", help="tile a dataset and write manifest + stats")
    p.add_argument("--src", help="directory with A/, B/, label/ (optionally per split)")
    p.add_argument("--out")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--split", type=parse_ratio, default=[7.0, 1.0, 2.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="echoed config.json (or YAML) supplying defaults")
    p.set_defaults(func=cmd_prepare)

    p = commands["synth"] = sub.add_parser("synth", help="generate the synthetic rectangle dataset")
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--split", type=parse_ratio, default=[4.0, 1.0, 1.0])
    p.add_argument("--config", help="echoed config.json (or YAML) supplying defaults")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--stats")
    p.add_argument("--run-dir")
    p.add_argument("--backbone", choices=["fcs", "ded"])
    p.add_argument("--width-multiplier", type=float)
    _bool_flag(p, "nl-fpn", "use the non-local FPN")
    _bool_flag(p, "dfm", "use dense fusion modules")
    _bool_flag(p, "ssl-heads", "add the two segmentation heads")
    p.add_argument("--num-seg-classes", type=int)
    p.add_argument("--stage-depths", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--factor", type=float)
    p.add_argument("--validation-start-epoch", type=int)
    p.add_argument("--variant", choices=["binary_ssl", "contrastive", "multiclass_ssl", "none"])
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--aux-warmup-steps", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = commands["eval"] = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--stats")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out")
    p.add_argument("--config", help="echoed config.json (or YAML) supplying defaults")
    p.set_defaults(func=cmd_eval)

    p = commands["predict"] = sub.add_parser("predict", help="write change/segmentation masks")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="all")
    p.add_argument("--stats")
    p.add_argument("--out")
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--render-errors", action="store_true")
    p.add_argument("--config", help="echoed config.json (or YAML) supplying defaults")
    p.set_defaults(func=cmd_predict)
    return parser


REQUIRED = {"prepare": ("src", "out"), "synth": ("out",), "eval": ("checkpoint", "manifest"),
            "predict": ("checkpoint", "manifest", "out")}


def parse_args(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse with config-file values slotted in between flags and defaults."""
    args = parser.parse_args(argv)
    if args.command in REQUIRED:
        if args.config:
            sub = parser.commands[args.command]
            known = {a.dest for a in sub._actions} - {"help", "config"}
            sub.set_defaults(**{k: v for k, v in read_config_file(args.config).items() if k in known})
            args = parser.parse_args(argv)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
        if missing:
            raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return args


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(parser, argv)
        return args.func(args)
    except (UsageError, FileNotFoundError) as e:
        print(f"fccdn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FCCDNError, ValueError, RuntimeError) as e:
        print(f"fccdn {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
