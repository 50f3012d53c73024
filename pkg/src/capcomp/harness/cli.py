"""Command-line entry point: ``python -m capcomp <subcommand>``.

Every subcommand writes JSON to ``--out`` (a directory) and prints a short
summary. Failures print ``{"error": ..., "message": ...}`` on stderr and exit
with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .. import flops as fl
from ..preference import train
from ..pruner import retained_count
from . import io
from .data import SPLITS, gen_synthetic_dataset
from .experiments import (RunConfig, ablation, build_preferences, get_lvlm_state, plot_curve,
                          prepare_seed, run_experiment, sweep_pruning_rates)
from .pipeline import evaluate
from .pretrain import build_models, warm_up_compensators


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--prune-rate", type=float, default=None)
    common.add_argument("--prune-strategy", choices=("cls_text", "attention", "random"))
    common.add_argument("--beams", type=int, default=None)
    common.add_argument("--no-caption", action="store_true")
    common.add_argument("--no-guidance", action="store_true")
    common.add_argument("--no-selector", action="store_true")
    common.add_argument("--out", default="out")
    common.add_argument("--cache-dir", default=None)
    common.add_argument("--models", help="checkpoint container from `pretrain` or `train-dpo`")

    p = argparse.ArgumentParser(prog="capcomp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset (JSONL)")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--split", choices=SPLITS, default="eval")
    sub.add_parser("pretrain", parents=[common], help="warm up and freeze the toy models")
    sub.add_parser("build-prefs", parents=[common], help="KL-scored preference dataset")
    t = sub.add_parser("train-dpo", parents=[common], help="DPO on a preference dataset")
    t.add_argument("--prefs", help="JSONL from build-prefs (default: <out>/prefs.jsonl)")
    sub.add_parser("eval", parents=[common], help="accuracy of one pipeline configuration")
    sub.add_parser("ablate", parents=[common], help="four-stage ablation table")
    s = sub.add_parser("sweep", parents=[common], help="accuracy vs pruning rate (CSV)")
    s.add_argument("--plot", action="store_true", help="also write sweep.png (needs matplotlib)")
    f = sub.add_parser("flops", parents=[common], help="analytic FLOPs report")
    f.add_argument("--profile", choices=("reference", "toy"), default="reference")
    f.add_argument("--question-len", type=int, default=10)
    f.add_argument("--caption-len", type=int, default=6)
    f.add_argument("--answer-len", type=int, default=2)
    f.add_argument("--mac-flops", type=int, choices=(1, 2), default=1)
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    pc = cfg.pipeline
    upd = {}
    if args.prune_rate is not None:
        upd["rate"] = args.prune_rate
    if args.prune_strategy:
        upd["strategy"] = args.prune_strategy
    if args.beams is not None:
        upd["beams"] = args.beams
    if args.no_caption:
        upd.update(caption=False, guidance=False, selector=False)
    if args.no_guidance:
        upd["guidance"] = False
    if args.no_selector:
        upd["selector"] = False
    cfg = replace(cfg, pipeline=replace(pc, **upd))
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _models(cfg: RunConfig, args):
    seed = cfg.seeds[0]
    if args.models:
        models = build_models(seed, cfg.lvlm, cfg.caption, cfg.selector)
        io.load_models_into(args.models, models)
        for m in (models.lvlm, models.captioner, models.selector):
            m.set_trainable(False)
        return models
    return prepare_seed(cfg, seed, args.cache_dir).models


def _warm(cfg: RunConfig, args, out: Path) -> dict:
    seed = cfg.seeds[0]
    models = build_models(seed, cfg.lvlm, cfg.caption, cfg.selector)
    lvlm_seed = seed if cfg.lvlm_seed is None else cfg.lvlm_seed
    state, meta = get_lvlm_state(cfg, lvlm_seed, args.cache_dir)
    models.lvlm.load_state_dict(state)
    models.lvlm.set_trainable(False)
    log: list = []
    warm_up_compensators(models, gen_synthetic_dataset(seed, cfg.n_pretrain, "pretrain"),
                         cfg.pretrain, seed, log)
    io.save_models(out / "models.ckpt", models, {"stage": "pretrain", "seed": seed})
    rep = {"lvlm_accuracy": meta["lvlm_accuracy"], "checksums": models.checksums(),
           "config_hash": cfg.config_hash()}
    io.write_json(out / "pretrain.json", rep)
    return rep


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = _dispatch(args, out)
    except SystemExit:
        raise
    except Exception as e:  # surfaced as a machine-readable error object
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.cmd}),
              file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


def _dispatch(args, out: Path) -> dict:
    if args.cmd == "gen-data":
        seed = 0 if args.seed is None else args.seed
        ds = gen_synthetic_dataset(seed, args.n, args.split)
        path = out / f"{args.split}-{seed}.jsonl"
        io.save_dataset(path, ds)
        return {"path": str(path), "n": len(ds)}
    if args.cmd == "flops":
        cfg = _config(args).pipeline
        prof = fl.reference_profile() if args.profile == "reference" else fl.toy_profile()
        kept = retained_count(prof.n_visual, cfg.rate)
        shape = fl.RunShape(kept, args.question_len, args.answer_len,
                            caption_len=args.caption_len if cfg.caption else 0,
                            beams=cfg.beams if cfg.caption else 0,
                            candidate_len=args.caption_len + 1 if cfg.caption else 0,
                            guided=cfg.guidance, selector=cfg.selector)
        rep = fl.pipeline_flops(shape, prof, mac_flops=args.mac_flops)
        io.write_json(out / "flops.json", rep.to_dict())
        (out / "flops.txt").write_text(rep.table() + "\n")
        print(rep.table(), file=sys.stderr)
        return {"total": rep.total, "ratio": rep.ratio, "avg_visual_tokens": rep.avg_visual_tokens}

    cfg = _config(args)
    seed = cfg.seeds[0]
    if args.cmd == "pretrain":
        return _warm(cfg, args, out)
    if args.cmd == "build-prefs":
        models = _models(cfg, args) if args.models else None
        if models is None:
            _warm(cfg, args, out)
            args.models = str(out / "models.ckpt")
            models = _models(cfg, args)
        recs, _ = build_preferences(gen_synthetic_dataset(seed, cfg.n_train, "train"), models,
                                    cfg.pref_rates, cfg.dpo.pool, cfg.pipeline.strategy)
        io.save_preferences(out / "prefs.jsonl", recs)
        return {"path": str(out / "prefs.jsonl"), "n_records": len(recs)}
    if args.cmd == "train-dpo":
        if not args.models:
            raise ValueError("train-dpo needs --models (from `pretrain`)")
        models = _models(cfg, args)
        recs = io.load_preferences(args.prefs or out / "prefs.jsonl")
        samples = {s.sample_id: s for s in gen_synthetic_dataset(seed, cfg.n_train, "train")}
        feats = {r.sample_id: models.lvlm.encode_image(samples[r.sample_id].image).patches
                 for r in recs}
        rep = train(recs, models.captioner, models.selector, replace(cfg.dpo, seed=seed), feats,
                    frozen_modules=[models.lvlm])
        io.save_models(out / "models-dpo.ckpt", models, {"stage": "dpo", "seed": seed})
        io.write_json(out / "dpo.json", rep)
        return {"final_loss": rep["steps"][-1]["loss"] if rep["steps"] else None,
                "steps": len(rep["steps"])}
    if args.cmd == "eval":
        models = _models(cfg, args)
        res = evaluate(gen_synthetic_dataset(seed, cfg.n_eval, "eval"), models, cfg.pipeline)
        res["config_hash"] = cfg.config_hash()
        io.write_json(out / "eval.json", res)
        return {"accuracy": res["accuracy"], "mean_flops_ratio": res["mean_flops_ratio"]}
    if args.cmd == "ablate":
        if args.models:
            models = _models(cfg, args)
            rows = ablation(gen_synthetic_dataset(seed, cfg.n_eval, "eval"), models,
                            cfg.pipeline, cfg.config_hash())
            io.write_json(out / "ablation.json", rows)
            return {r["stage"]: r["accuracy"] for r in rows}
        rep = run_experiment(cfg, args.cache_dir, out, stages=("ablation",))
        return rep["ablation_mean"]
    if args.cmd == "sweep":
        if not args.models:
            rep = run_experiment(cfg, args.cache_dir, out, stages=("sweep",))
            if args.plot:
                plot_curve(rep["sweep_mean"], out / "sweep.png")
            return {"rows": rep["sweep_mean"]}
        models = _models(cfg, args)
        rows = sweep_pruning_rates(gen_synthetic_dataset(seed, cfg.n_eval, "eval"), models,
                                   cfg.sweep_rates, cfg.pipeline, csv_path=out / "sweep.csv",
                                   plot_path=out / "sweep.png" if args.plot else None,
                                   config_hash=cfg.config_hash())
        io.write_json(out / "sweep.json", rows)
        return {"rows": [{k: r[k] for k in ("rate", "baseline", "accm")} for r in rows]}
    raise ValueError(f"unknown command {args.cmd}")


if __name__ == "__main__":
    sys.exit(main())
