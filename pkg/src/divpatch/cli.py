"""Command line: ``divpatch {train,eval,profile,gradcheck,ablate,mix-preview}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import load_splits
from .metrics import profile, write_dump
from .mixing import mix_batch, write_preview_csv
from .train import ablate, evaluate, load_config, train, write_ablation_csv
from .vit import forward, load_checkpoint


def _config(args):
    if args.config and not Path(args.config).is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    overrides = list(args.set or [])
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir = {args.output_dir}")
    return load_config(args.config, overrides)


def _checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    config = _config(args)
    runlog = train(config)
    last = runlog.epochs[-1]
    print(f"steps={len(runlog.steps)} eval_top1={last.eval_top1:.4f} "
          f"P_first={last.profile.first():.4f} P_last={last.profile.last():.4f}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    params = _checkpoint(args.checkpoint)
    _, eval_set = load_splits(config.dataset_spec(), config.seed)
    print(f"top1={evaluate(params, eval_set, params.config.patch_size):.4f}")
    return 0


def cmd_profile(args) -> int:
    config = _config(args)
    params = _checkpoint(args.checkpoint)
    _, eval_set = load_splits(config.dataset_spec(), config.seed)
    patches = eval_set.patches(params.config.patch_size)
    prof = profile(params, patches, max_examples=args.max_examples)
    prof.to_csv(args.out)
    for s in prof.layers:
        print(f"layer {s.layer}: P={s.mean_p:.4f} (std {s.std_p:.4f}, n={s.count})")
    if args.dump:
        _, stack = forward(params, patches[args.dump_index : args.dump_index + 1])
        write_dump(stack.example(0), args.dump)
    return 0


def cmd_gradcheck(args) -> int:
    return gradcheck.main()


def cmd_ablate(args) -> int:
    config = _config(args)
    components = [c for c in args.components.split(",") if c]
    rows = ablate(config, components)
    if not config.output_dir:
        write_ablation_csv(rows, args.out or "ablation.csv")
    for row in rows:
        print(row)
    return 0


def cmd_mix_preview(args) -> int:
    config = _config(args)
    train_set, _ = load_splits(config.dataset_spec(), config.seed)
    count = min(args.count, len(train_set)) // 2 * 2
    patches = train_set.patches(config.patch_size)[:count]
    rng = np.random.default_rng([config.seed, 0xC5])
    mixed = mix_batch(patches, train_set.labels[:count], config.mix_spec(), rng, config.num_classes)
    write_preview_csv(mixed, config.mix_mode, args.out)
    print(f"wrote {count} mixed examples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divpatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="top-1 accuracy of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("profile", help="per-layer patch similarity"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="profile.csv")
    p.add_argument("--max-examples", type=int, default=None)
    p.add_argument("--dump", help="also write one example's activations as PDMP")
    p.add_argument("--dump-index", type=int, default=0)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("ablate", help="train every loss on/off combination"))
    p.add_argument("--components", default="cos,contrastive,mixing")
    p.add_argument("--output-dir")
    p.add_argument("--out", help="CSV path when no output dir is configured")
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("mix-preview", help="write mixing masks as CSV"))
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--out", default="mix_preview.csv")
    p.set_defaults(func=cmd_mix_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"divpatch {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
