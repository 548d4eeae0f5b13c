"""Command line entry point: ``eftlab <command> [--config FILE] [--preset NAME] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .env import ConfigError
from .harness import (
    cmd_behavior_study,
    cmd_diversity_ablation,
    cmd_export_plotdata,
    cmd_inference_study,
    cmd_noise_study,
    cmd_ood_study,
    cmd_train,
    default_checkpoint,
    load_config,
)

COMMANDS = ("train", "inference-study", "diversity-ablation", "noise-study", "ood-study",
            "behavior-study", "export-plotdata")
NEEDS_CHECKPOINT = {
    "inference-study": cmd_inference_study,
    "diversity-ablation": cmd_diversity_ablation,
    "noise-study": cmd_noise_study,
    "behavior-study": cmd_behavior_study,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eftlab", description="Multi-character policy, character inference and "
                                "foresighted action selection on a ring road.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML file layered over the preset")
    p.add_argument("--preset", choices=("desk", "paper_scale"), default="desk")
    p.add_argument("--seed", type=int, help="training seed; study seeds become seed, seed+1, ...")
    p.add_argument("--out", help="run directory (default from the config)")
    p.add_argument("--checkpoint", help="policy checkpoint (default <out>/train/checkpoint.json)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args) -> None:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = replace(cfg, train_seed=args.seed,
                      seeds=tuple(args.seed + k for k in range(len(cfg.seeds))),
                      eval_seeds=tuple(args.seed + k for k in range(len(cfg.eval_seeds))))
    out = args.out if args.out is not None else cfg.output_dir
    cmd = args.command
    if cmd == "train":
        def progress(ep, r):
            if ep % 10 == 0:
                logging.info("episode %d mean reward %.3f", ep, r)
        res = cmd_train(cfg, out, progress)
        print(res["checkpoint"])
    elif cmd == "ood-study":
        print(cmd_ood_study(cfg, out)["ood"])
    elif cmd == "export-plotdata":
        res = cmd_export_plotdata(out)
        for fig, reason in res["skipped"].items():
            print(f"skipped {fig}: {reason}", file=sys.stderr)
        for path in res["written"].values():
            print(path)
    else:
        ck = args.checkpoint or default_checkpoint(cfg, out)
        res = NEEDS_CHECKPOINT[cmd](cfg, ck, out)
        print(next(v for v in res.values() if not isinstance(v, list)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0
