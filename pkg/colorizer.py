#!/usr/bin/env python3
"""
GAN colorizer command line
──────────────────────────
Usage:
  python colorizer.py --config run.yaml prepare-data [ROOT]
  python colorizer.py --config run.yaml train [--resume CKPT]
  python colorizer.py colorize CKPT INPUT OUTPUT
  python colorizer.py --config run.yaml evaluate [CKPT] [--split holdout|train|all] [--oracle] [--json]
  python colorizer.py --config run.yaml ablate

Environment:
  COLORIZER_DEVICE   torch device for training/inference (default: cpu)
  COLORIZER_WORKERS  image decode worker threads (default: 4)

Exit codes: 0 = success, 2 = usage/config/data error, 3 = runtime/numeric error
"""
import argparse
import json
import os
import sys
import textwrap
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from console import Col, default_device, log
from dataio import (FilterPolicy, LabelMode, build_manifest, filter_manifest, load_image,
                    read_manifest, save_image, split_manifest, write_manifest)
from errors import (EXIT_OK, EXIT_RUNTIME, ColorizerError, ConfigError, UsageError,
                    exit_code_for)
from losses import LossWeights
from networks import NetworkConfig
from trainer import (Colorizer, ExtractorConfig, TrainConfig, evaluate_entries, latest_checkpoint,
                     run_ablation, train)

MANIFEST_NAME = "manifest.tsv"

_FLOATS = {"learning_rate", "chroma_threshold", "grayscale_epsilon", "lambda1", "lambda2",
           "lambda3", "dropout"}
_INTS = {"batch_size", "epochs", "seed", "checkpoint_every", "max_steps", "workers",
         "image_size", "levels", "base_channels", "max_channels", "num_classes", "head_width",
         "disc_fc_width", "channels"}
_TRAIN_SECTION_EXCLUDES = {"network", "extractor", "label_mode"}


@dataclass
class RunConfig:
    dataset_root: str = "data"
    label_mode: LabelMode = LabelMode.SINGLE_CLASS
    manifest: str = None
    attributes_file: str = None
    out_dir: str = "runs/default"
    filter: FilterPolicy = field(default_factory=FilterPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def manifest_path(self):
        return self.manifest or os.path.join(self.out_dir, MANIFEST_NAME)

    def to_dict(self):
        train = self.train.to_dict()
        network, extractor = train.pop("network"), train.pop("extractor")
        train.pop("label_mode")
        return {
            "dataset_root": self.dataset_root,
            "label_mode": LabelMode(self.label_mode).value,
            "manifest": self.manifest,
            "attributes_file": self.attributes_file,
            "out_dir": self.out_dir,
            "filter": asdict(self.filter),
            "network": network,
            "train": train,
            "extractor": extractor,
        }


def _coerce(key, val):
    if val is None:
        return None
    if key in _FLOATS:
        return float(val)
    if key in _INTS:
        return int(val)
    if key == "disc_channels":
        return tuple(int(c) for c in val)
    return val


def _section(cls, data, where, exclude=()):
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(map(str, unknown)))}")
    try:
        return cls(**{k: _coerce(k, v) for k, v in data.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def parse_run_config(data):
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    top = {"dataset_root", "label_mode", "manifest", "attributes_file", "out_dir",
           "filter", "network", "train", "extractor"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(map(str, unknown)))}")

    train_data = dict(data.get("train") or {})
    weights = _section(LossWeights, train_data.pop("weights", None), "train.weights")
    network = _section(NetworkConfig, data.get("network"), "network")
    extractor = _section(ExtractorConfig, data.get("extractor"), "extractor")
    try:
        label_mode = LabelMode(data.get("label_mode", LabelMode.SINGLE_CLASS.value))
    except ValueError as e:
        raise ConfigError(f"invalid label_mode: {e}") from e
    train_cfg = _section(TrainConfig, train_data, "train", exclude=_TRAIN_SECTION_EXCLUDES)
    train_cfg = replace(train_cfg, weights=weights, network=network, extractor=extractor,
                        label_mode=label_mode)
    cfg = RunConfig(
        dataset_root=str(data.get("dataset_root", RunConfig.dataset_root)),
        label_mode=label_mode,
        manifest=data.get("manifest"),
        attributes_file=data.get("attributes_file"),
        out_dir=str(data.get("out_dir", RunConfig.out_dir)),
        filter=_section(FilterPolicy, data.get("filter"), "filter"),
        train=train_cfg,
    )
    # num_classes is replaced from the manifest at train time; geometry must still be sound.
    cfg.train.validate()
    return cfg


def load_run_config(path):
    if path is None:
        return RunConfig()
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return parse_run_config(data)


def save_run_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.yaml")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    os.replace(tmp, path)
    return path


def _manifest_for(cfg):
    if os.path.isfile(cfg.manifest_path):
        return read_manifest(cfg.manifest_path)
    return build_manifest(cfg.dataset_root, cfg.label_mode, cfg.attributes_file)


# ══════════════════════════════════════════════════════════════════════════════
# Commands
# ══════════════════════════════════════════════════════════════════════════════

def cmd_prepare_data(cfg, root=None):
    root = root or cfg.dataset_root
    manifest = build_manifest(root, cfg.label_mode, cfg.attributes_file)
    surviving, stats = filter_manifest(manifest, cfg.filter, workers=cfg.train.workers)
    write_manifest(surviving, cfg.manifest_path)
    print(f"total               {stats.total}")
    print(f"rejected-grayscale  {stats.rejected_grayscale}")
    print(f"rejected-low-chroma {stats.rejected_low_chroma}")
    print(f"surviving           {stats.surviving}")
    log("DATA", f"manifest written to {cfg.manifest_path}", Col.GREEN)
    return EXIT_OK


def cmd_train(cfg, resume=None):
    train_split, holdout = split_manifest(_manifest_for(cfg))
    log("DATA", f"{len(train_split)} train / {len(holdout)} held-out images", Col.CYAN)
    save_run_config(cfg, cfg.out_dir)
    state = train(train_split, cfg.train, cfg.out_dir, cfg.filter, resume=resume,
                  device=default_device())
    log("END", f"training finished at step {state.global_step}", Col.GREEN)
    return EXIT_OK


def cmd_colorize(checkpoint, input_path, output_path):
    image = load_image(input_path)
    colorizer = Colorizer.from_checkpoint(checkpoint, default_device())
    save_image(colorizer.colorize(image), output_path)
    log("END", f"wrote {output_path}", Col.GREEN)
    return EXIT_OK


def cmd_evaluate(cfg, checkpoint=None, split="holdout", oracle=False, as_json=False):
    manifest = read_manifest(cfg.manifest_path)
    if split != "all":
        train_split, holdout = split_manifest(manifest)
        manifest = holdout if split == "holdout" else train_split
    colorizer = None
    if not oracle:
        colorizer = Colorizer.from_checkpoint(checkpoint or latest_checkpoint(cfg.out_dir),
                                              default_device())
    report = evaluate_entries(colorizer, manifest, oracle=oracle, workers=cfg.train.workers)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if as_json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(report.format_table())
    return EXIT_OK


def cmd_ablate(cfg):
    manifest = _manifest_for(cfg)
    save_run_config(cfg, cfg.out_dir)
    try:
        result = run_ablation(manifest, cfg.train, cfg.out_dir, cfg.filter,
                              device=default_device())
    except (UsageError, FileNotFoundError):
        raise
    except (ColorizerError, OSError) as e:
        log("ERROR", f"ablation failed: {type(e).__name__}: {e}", Col.RED)
        return EXIT_RUNTIME
    print(result.table)
    return EXIT_OK


# ══════════════════════════════════════════════════════════════════════════════
# CLI
# ══════════════════════════════════════════════════════════════════════════════

def build_parser():
    ap = argparse.ArgumentParser(
        prog="colorizer.py",
        description="Train and run the conditional-GAN grayscale colorizer.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent("""\
            Examples:
              python colorizer.py --config run.yaml prepare-data data/places
              python colorizer.py --config run.yaml --seed 3 train
              python colorizer.py colorize runs/default/ckpt_2000.bin old.jpg old_colour.png
              python colorizer.py --config run.yaml evaluate --split holdout --json
        """),
    )
    ap.add_argument("--config",  help="YAML run config (defaults apply when omitted)")
    ap.add_argument("--seed",    type=int, help="Override train.seed")
    ap.add_argument("--out-dir", help="Override out_dir")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="Build and filter the dataset manifest")
    p.add_argument("root", nargs="?", help="Dataset root (defaults to dataset_root)")

    p = sub.add_parser("train", help="Train generator and discriminator")
    p.add_argument("--resume", help="Checkpoint to resume from")

    p = sub.add_parser("colorize", help="Colorize one image")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("evaluate", help="Score colorized images against their originals")
    p.add_argument("checkpoint", nargs="?", help="Checkpoint (defaults to the latest in out_dir)")
    p.add_argument("--split", choices=("holdout", "train", "all"), default="holdout")
    p.add_argument("--oracle", action="store_true",
                   help="Score ground truth against itself (sanity check)")
    p.add_argument("--json", action="store_true", help="Print key-value JSON instead of a table")

    sub.add_parser("ablate", help="Train the L1 / per / L1+per ablation and compare them")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
        if args.out_dir:
            cfg = replace(cfg, out_dir=args.out_dir)

        if args.command == "prepare-data":
            return cmd_prepare_data(cfg, args.root)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "colorize":
            return cmd_colorize(args.checkpoint, args.input, args.output)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, args.split, args.oracle, args.json)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise UsageError(f"unknown command {args.command}")
    except (ColorizerError, OSError) as e:
        log("ERROR", f"{type(e).__name__}: {e}", Col.RED)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
