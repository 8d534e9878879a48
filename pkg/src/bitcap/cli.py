"""Command-line entry points.

Subcommands: gen-data, train-teacher, train-stage1, train-stage2, eval,
sample, ablate.  Flags mirror the run-config keys; a JSON config file
passed with --config overrides flags.  Training commands require --seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .ablate import bench_config, run_ablation
from .config import RunConfig, config_from_dict, load_config_file
from .data import generate_dataset
from .train import (
    evaluate_checkpoint,
    load_bundle,
    load_cascade,
    train_stage1,
    train_stage2,
    train_teacher,
)

TRAIN_COMMANDS = {"train-teacher", "train-stage1", "train-stage2", "ablate"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS)
        elif f.name == "seed":
            parser.add_argument(flag, dest=f.name, type=int, default=argparse.SUPPRESS)
        else:
            kind = type(f.default) if f.default is not None else str
            parser.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS)
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file; overrides flags")


def _resolve_config(args: argparse.Namespace, command: str, bench: bool = False) -> RunConfig:
    flag_values = {
        f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)
    }
    base = bench_config() if bench else RunConfig()
    cfg = config_from_dict(flag_values, base=base)
    if args.config:
        cfg = load_config_file(args.config, base=cfg)
    if command in TRAIN_COMMANDS and cfg.seed is None:
        raise SystemExit(f"{command}: --seed is required")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitcap",
                                     description="bit-diffusion caption benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--gen-seed", type=int, required=True, help="dataset generation seed")

    for name, help_text in [
        ("train-teacher", "train the autoregressive guide model"),
        ("train-stage1", "train the cascade with the joint objective"),
        ("train-stage2", "reward-guided fine-tuning"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "train-stage1":
            p.add_argument("--resume", type=str, default=None)
        if name == "train-stage2":
            p.add_argument("--stage1-ckpt", type=str, required=True)
            p.add_argument("--teacher-ckpt", type=str, required=True)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _add_config_flags(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--split", type=str, default="test", choices=["train", "val", "test"])

    p = sub.add_parser("sample", help="print decoded captions for a split")
    _add_config_flags(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--split", type=str, default="test", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--sample-seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run the four-arm comparison grid")
    _add_config_flags(p)
    p.add_argument("--seeds", type=str, default=None,
                   help="comma-separated seeds; defaults to seed,seed+1,seed+2")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command

    if command == "gen-data":
        cfg = _resolve_config(args, command)
        summary = generate_dataset(cfg.dataset_spec(), seed=args.gen_seed,
                                   out_dir=cfg.data_dir)
        print(f"wrote {cfg.data_dir}: {summary['splits']} hash={summary['hash'][:16]}")
        return 0

    if command == "train-teacher":
        cfg = _resolve_config(args, command)
        path = train_teacher(cfg)
        print(f"teacher checkpoint: {path}")
        return 0

    if command == "train-stage1":
        cfg = _resolve_config(args, command)
        best, curve = train_stage1(cfg, resume=args.resume)
        print(f"stage-1 checkpoint: {best}\ncurve: {curve}")
        return 0

    if command == "train-stage2":
        cfg = _resolve_config(args, command)
        best, curve = train_stage2(cfg, args.stage1_ckpt, args.teacher_ckpt)
        print(f"stage-2 checkpoint: {best}\ncurve: {curve}")
        return 0

    if command == "eval":
        cfg = _resolve_config(args, command)
        report = evaluate_checkpoint(cfg, args.ckpt, args.split, out_dir=cfg.out_dir)
        for key, value in report.items():
            print(f"{key}={value}")
        return 0

    if command == "sample":
        cfg = _resolve_config(args, command)
        bundle = load_bundle(cfg)
        model, _, _ = load_cascade(args.ckpt)
        from .train import decode_split

        samples = bundle.split(args.split)[: args.limit]
        decoded = decode_split(model, samples, cfg,
                               np.random.default_rng(args.sample_seed))
        for sample in samples:
            words = " ".join(bundle.vocab.decode_ids(decoded[sample.scene_id]))
            ref = " ".join(bundle.vocab.decode_ids(sample.captions[0]))
            print(f"scene {sample.scene_id}\n  decoded: {words}\n  reference: {ref}")
        return 0

    if command == "ablate":
        cfg = _resolve_config(args, command, bench=True)
        seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
                 else [cfg.seed, cfg.seed + 1, cfg.seed + 2])
        result = run_ablation(cfg, seeds, cfg.out_dir)
        print(result["table"])
        return 0

    raise SystemExit(f"unknown command {command}")


if __name__ == "__main__":
    sys.exit(main())
