"""Command-line entry points: ``train``, ``eval``, ``phantom`` and ``flops``."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError
from .data.nifti import NiftiError
from .data.phantom import write_phantom_dataset
from .model import build_model, count_params, flop_breakdown
from .tensor import ShapeError
from .training import TrainingError, config_from_file, evaluate, train


def _cmd_train(args):
    cfg = config_from_file(args.config, seed=args.seed)
    train(cfg, resume=args.resume)
    return 0


def _cmd_eval(args):
    cases = evaluate(args.checkpoint, args.manifest, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def _cmd_phantom(args):
    path = write_phantom_dataset(args.out, args.n, (args.size,) * 3, seed=args.seed if args.seed is not None else 0)
    print(path)
    return 0


def _cmd_flops(args):
    cfg = config_from_file(args.config, seed=args.seed)
    graph = build_model(cfg.model)
    shape = (1, cfg.model.in_channels) + (args.size,) * 3
    stages = flop_breakdown(graph, shape)
    for name, n in stages.items():
        print(f"{name:12s} {n:>16,d}")
    print(f"{'total':12s} {sum(stages.values()):>16,d}")
    print(f"{'params':12s} {count_params(graph):>16,d}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ukan-ep", description="UKAN-EP volumetric segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="per-case and aggregate metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("phantom", help="write a synthetic NIfTI dataset and manifest")
    g.add_argument("--n", type=int, default=2)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_phantom)

    f = sub.add_parser("flops", help="parameter count and per-stage FLOPs")
    f.add_argument("--config", required=True)
    f.add_argument("--size", type=int, default=32, help="cubic input extent")
    f.set_defaults(func=_cmd_flops)

    for s in (t, e, g, f):
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NiftiError, ShapeError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
