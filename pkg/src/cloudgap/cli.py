"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import chipstore, harness, masking, metrics
from .errors import ConfigError, DataError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("cloudgap")


def _cmd_gen_data(args) -> int:
    chips = chipstore.generate_synthetic_chips(args.chips, args.height, args.width, args.seed,
                                               patch_size=args.patch_size)
    masks = chipstore.generate_synthetic_masks(args.masks, args.height, args.width, args.seed + 1)
    chipstore.save_chips(chips, args.root)
    chipstore.save_masks(masks, args.root)
    print(f"wrote {len(chips)} chips and {len(masks)} masks to {args.root}")
    return EXIT_OK


def _cmd_split(args) -> int:
    chips = chipstore.load_chips(args.root)
    masks = chipstore.load_masks(args.root)
    split = chipstore.split_dataset(chips, masks, args.train_fraction, args.val_masks, args.seed)
    chipstore.write_split(split, args.root)
    print(f"train {len(split.train_ids)} / val {len(split.val_ids)} chips; "
          f"train {len(split.train_mask_ids)} / val {len(split.val_mask_ids)} masks")
    return EXIT_OK


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(harness.ExperimentConfig)}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    for name in _CONFIG_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)


def _config_from(args) -> harness.ExperimentConfig:
    overrides = {name: getattr(args, name) for name in _CONFIG_FIELDS}
    return harness.load_config(args.config, **overrides)


def _cmd_train(args) -> int:
    config = _config_from(args)
    result = harness.run_experiment(config)
    r = result.row
    print(f"best run {r.run} epoch {r.epoch}: val MAE {r.val_mae:.5f} SSIM {r.val_ssim:.4f}; "
          f"summary {result.summary_csv}")
    return EXIT_OK


def _cmd_eval(args, zero_shot: bool) -> int:
    ds = harness.load_dataset(args.root)
    chips, masks = (ds.train, ds.train_masks) if args.split == "train" else (ds.val, ds.val_masks)
    row, records = harness.zero_shot_eval(args.checkpoint, chips, masks, args.mode, args.out,
                                          model_tag=args.model_tag)
    label = "zero-shot" if zero_shot else "eval"
    print(f"{label}: {len(records)} chips, MAE {row.val_mae:.5f} SSIM {row.val_ssim:.4f}")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    chip = chipstore.read_chip(args.chip)
    masks = [chipstore.read_mask(p) for p in args.mask]
    masked = masking.apply_mask(chip, masking.assign_masks(chip, masks, args.mode, args.seed))
    _, impute = harness.load_imputer(args.checkpoint)
    generated = impute([masked])[0]
    filled = np.clip(metrics.composite(generated, chip.data, masked.pixel_mask), 0.0, 1.0)
    chipstore.write_chip(chipstore.Chip(chip.id, filled.astype(np.float32), chip.dates), args.out)
    mae = metrics.mae_masked(filled, chip.data, masked.pixel_mask)
    print(f"wrote {args.out}; masked MAE {mae:.5f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    report = harness.make_report(args.csv, args.out, plots=not args.no_plots)
    print(report.table_text)
    if report.empty:
        print("no summary rows found", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudgap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic chips and cloud masks")
    p.add_argument("--root", required=True)
    p.add_argument("--chips", type=int, default=80)
    p.add_argument("--masks", type=int, default=100)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("split", help="partition chips and build the balanced validation mask pool")
    p.add_argument("--root", required=True)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--val-masks", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="run an experiment (all runs, all epochs)")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    for name, zero_shot in (("eval", False), ("zero-shot", True)):
        p = sub.add_parser(name, help="evaluate a checkpoint without training")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--root", required=True)
        p.add_argument("--mode", default="E1", choices=masking.MODES)
        p.add_argument("--split", default="val", choices=("train", "val"))
        p.add_argument("--model-tag")
        p.add_argument("--out")
        p.set_defaults(func=lambda a, z=zero_shot: _cmd_eval(a, z))

    p = sub.add_parser("reconstruct", help="gap-fill one chip with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chip", required=True)
    p.add_argument("--mask", required=True, nargs="+")
    p.add_argument("--mode", default="E1", choices=masking.MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("report", help="tables and figures from experiment CSVs")
    p.add_argument("csv", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
