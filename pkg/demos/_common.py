"""Shared setup for the demo scripts."""

import argparse
from dataclasses import replace

from capcomp.harness.experiments import RunConfig, prepare_seed
from capcomp.harness.pretrain import PretrainConfig


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--cache-dir", default=".capcomp-cache",
                   help="checkpoints are reused across demos (default: %(default)s)")
    p.add_argument("--quick", action="store_true",
                   help="short warm-up (about a minute); models come out rough")
    p.add_argument("--seed", type=int, default=0)
    return p


def config(args) -> RunConfig:
    cfg = RunConfig(seeds=(args.seed,))
    if args.quick:
        cfg = replace(cfg, n_pretrain=2000, n_train=200,
                      pretrain=PretrainConfig(vision_steps=200, lvlm_steps=600, mix_steps=300,
                                              caption_steps=300, text_steps=100, floor=0.0),
                      dpo=replace(cfg.dpo, steps=150))
    return cfg


def seed_artifacts(args):
    cfg = config(args)
    return cfg, prepare_seed(cfg, args.seed, args.cache_dir)
