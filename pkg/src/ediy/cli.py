"""Command-line entry point: ``ediy <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evaluation, training
from .data import generate_synthetic, save_dataset
from .errors import EdiyError
from .training import TrainConfig


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config)
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, dataset=str(args.data))
    if getattr(args, "max_steps", None) is not None:
        cfg = dataclasses.replace(cfg, max_steps=args.max_steps)
    return cfg


def cmd_synth(args) -> int:
    images = generate_synthetic(args.seed, args.n, args.classes, args.size)
    save_dataset(images, args.out)
    print(f"wrote {len(images)} images to {args.out}", file=sys.stderr)
    return 0


def cmd_bootstrap_teacher(args) -> int:
    cfg = _load_config(args)
    ckpt = training.bootstrap_teacher(cfg, args.out, resume=args.resume)
    print(f"teacher checkpoint at {ckpt.path} (step {ckpt.manifest['step']})", file=sys.stderr)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    teacher = args.teacher
    if teacher is not None:
        teacher = training.resolve_checkpoint_dir(teacher)
        cfg = dataclasses.replace(cfg, teacher=str(teacher))
    ckpt = training.run_pretraining(cfg, args.out, teacher=teacher, resume=args.resume)
    print(f"checkpoint at {ckpt.path} (step {ckpt.manifest['step']})", file=sys.stderr)
    return 0


def cmd_diagnose(args) -> int:
    report = evaluation.diversity_report(args.checkpoint, args.data, args.samples, args.seed)
    _emit(report.to_dict())
    return 0


def cmd_saliency(args) -> int:
    sal = evaluation.saliency_map(args.checkpoint, args.image)
    evaluation.write_pgm(sal.render, args.out)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_probe(args) -> int:
    cfg = evaluation.ProbeConfig(epochs=args.epochs, lr=args.lr)
    if args.random_init:
        source = evaluation.random_init_state(seed=args.seed)
    else:
        source = args.checkpoint
    result = evaluation.linear_probe(source, args.data, args.seed, cfg)
    _emit(result.to_dict())
    return 0


def cmd_match_inspect(args) -> int:
    _emit(evaluation.match_inspect(args.teacher, args.image, args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ediy", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a labelled synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--classes", required=True, type=int)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, func in (("bootstrap-teacher", cmd_bootstrap_teacher), ("pretrain", cmd_pretrain)):
        p = sub.add_parser(name, help="stage 1 BYOL run" if func is cmd_bootstrap_teacher else "region-aware run")
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--data", type=Path, help="override the dataset path of the config")
        p.add_argument("--max-steps", type=int)
        p.add_argument("--resume", type=Path, help="checkpoint or run directory to continue from")
        if func is cmd_pretrain:
            p.add_argument("--teacher", type=Path)
        p.set_defaults(func=func)

    p = sub.add_parser("diagnose", help="region diversity statistics as JSON")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("saliency", help="feature-norm heatmap as binary PGM")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("probe", help="linear probe accuracy as JSON")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--random-init", action="store_true", help="probe an untrained encoder")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("match-inspect", help="teacher matchings for one augmented pair as JSON")
    p.add_argument("--teacher", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_match_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except EdiyError as exc:
        print(f"ediy: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
