"""Command line entry point: ``kdctc <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields, replace
from pathlib import Path

from . import data_manifest as dm
from .backbone import load_checkpoint
from .experiment import (
    evaluate,
    generate_synthetic_texture_dataset,
    load_config,
    render_table,
    report,
    run_experiment,
)
from .image_pipeline import ImageLoader
from .trainer import METHODS, TrainConfig, train


def _int_list(text: str):
    return [int(x) for x in text.replace(",", " ").split()]


def _str_list(text: str):
    return [x for x in text.replace(",", " ").split()]


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="flat YAML key/value config file")
    hints = typing.get_type_hints(TrainConfig)
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = hints[f.name]
        if kind is bool:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif kind in (int, float, str):
            p.add_argument(flag, dest=f.name, type=kind, default=None)
        else:  # Optional[str]
            p.add_argument(flag, dest=f.name, type=str, default=None)


def _config_from_args(args, skip=()) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig) if f.name not in skip}
    return load_config(args.config, overrides)


def _manifest_with_root(path, root):
    m = dm.read_manifest(path)
    if root is not None:
        m = replace(m, root=str(root))
    if m.root is None:
        raise SystemExit(f"{path} records no dataset root; pass --root")
    return m


def cmd_prepare_splits(args) -> int:
    written = dm.prepare_splits(
        args.root,
        args.out,
        percentages=args.percentages,
        seeds=args.seeds,
        split_seed=args.split_seed,
        subsample_per_class=args.subsample_per_class,
    )
    for name, path in written.items():
        m = dm.read_manifest(path)
        print(f"{name}\t{m.role}\t{m.percentage}%\tseed={m.seed}\tper_class={m.per_class_count}\t{path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = _manifest_with_root(args.manifest, args.root)
    val = _manifest_with_root(args.val_manifest, args.root) if args.val_manifest else None
    from .experiment import build_for_config

    model = build_for_config(cfg, manifest.classes, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.resolved().to_dict(), sort_keys=True, indent=1) + "\n")
    train(manifest, cfg, model, loader=ImageLoader(manifest.root), val_manifest=val, out_dir=out)
    print(f"checkpoint written to {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = _manifest_with_root(args.manifest, args.root)
    res = evaluate(model, manifest, image_size=args.image_size)
    print(f"accuracy\t{res['test_accuracy']:.4f}")
    for name, acc in zip(manifest.classes, res["per_class_accuracy"]):
        print(f"{name}\t{acc:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(res, indent=1) + "\n")
    return 0


def cmd_experiment(args) -> int:
    cfg = _config_from_args(args, skip=("method", "seed"))
    _, rows = run_experiment(
        args.root,
        args.percentages,
        args.seeds,
        args.methods,
        cfg,
        args.results_dir,
        split_seed=args.split_seed,
        subsample_per_class=args.subsample_per_class,
    )
    if rows:
        print(render_table(rows)[0], end="")
    return 0


def cmd_report(args) -> int:
    written = report(args.results_dir, args.out)
    print(written["table_txt"].read_text(), end="")
    return 0


def cmd_synth_data(args) -> int:
    root = generate_synthetic_texture_dataset(args.classes, args.per_class, args.size, args.seed, args.out)
    print(root)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdctc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-splits", help="write test / train manifests for every percentage and seed")
    p.add_argument("--root", required=True)
    p.add_argument("--percentages", type=_int_list, default=list(dm.CANONICAL_PERCENTAGES))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--subsample-per-class", type=int, default=None)
    p.add_argument("--out", default="splits")
    p.set_defaults(func=cmd_prepare_splits)

    p = sub.add_parser("train", help="train one model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--root", help="override the dataset root recorded in the manifest")
    p.add_argument("--out", default="run")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--image-size", type=int, default=192)
    p.add_argument("--json", help="also write metrics as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run methods x percentages x seeds on one test split")
    p.add_argument("--root", required=True)
    p.add_argument("--methods", type=_str_list, default=["vanilla", "kd_ctcnet"])
    p.add_argument("--percentages", type=_int_list, default=list(dm.CANONICAL_PERCENTAGES))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--subsample-per-class", type=int, default=None)
    p.add_argument("--results-dir", default="results")
    _add_config_flags(p, skip=("method", "seed"))
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render tables and confusion matrices from results")
    p.add_argument("--results-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth-data", help="write a synthetic class-per-folder texture dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--size", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "methods", None):
        bad = [m for m in args.methods if m not in METHODS]
        if bad:
            raise SystemExit(f"unknown methods {bad}; choose from {METHODS}")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
