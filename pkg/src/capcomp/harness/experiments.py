"""Config-driven warm-up, preference building, DPO, ablation lattice and pruning-rate sweeps."""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..captioner import CaptionConfig
from ..lvlm import LvlmConfig
from ..preference import DpoConfig, build_preference_pairs, train
from ..pruner import prune
from ..selector import SelectorConfig
from . import io
from .data import gen_synthetic_dataset
from .pipeline import PipelineConfig, evaluate
from .pretrain import (Models, PretrainConfig, build_models, lvlm_accuracy, warm_up_compensators,
                       warm_up_lvlm)

LATTICE = (
    ("baseline", dict(caption=False, guidance=False, selector=False)),
    ("+caption", dict(caption=True, guidance=False, selector=False)),
    ("+guidance", dict(caption=True, guidance=True, selector=False)),
    ("+selector", dict(caption=True, guidance=True, selector=True)),
)

_SUBCONFIGS = {"lvlm": LvlmConfig, "caption": CaptionConfig, "selector": SelectorConfig,
               "pretrain": PretrainConfig, "dpo": DpoConfig, "pipeline": PipelineConfig}


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple = (0, 1, 2)
    lvlm: LvlmConfig = field(default_factory=LvlmConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    n_pretrain: int = 5000
    n_train: int = 1000
    n_eval: int = 200
    n_gate: int = 200  # samples used for the LVLM accuracy floor
    pref_rates: tuple = (0.9, 0.9375, 0.97)
    sweep_rates: tuple = (0.9, 0.9375, 0.97)
    lvlm_seed: int | None = 0  # one frozen LVLM shared by every seed; None = per seed

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if list(self.sweep_rates) != sorted(self.sweep_rates):
            raise ValueError("sweep rates must be ascending")
        if min(self.n_pretrain, self.n_train, self.n_eval, self.n_gate) < 1:
            raise ValueError("dataset sizes must be positive")

    def to_dict(self) -> dict:
        return io._plain(asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kw = {}
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown run-config keys {sorted(unknown)}")
        for k, v in d.items():
            if k in _SUBCONFIGS:
                sub = _SUBCONFIGS[k]
                kw[k] = sub(**{a: tuple(b) if isinstance(b, list) else b for a, b in v.items()})
            elif isinstance(v, list):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# warm-up with checkpoint caching
# ---------------------------------------------------------------------------


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(io._plain(parts), sort_keys=True).encode()).hexdigest()[:16]


def get_lvlm_state(cfg: RunConfig, seed: int, cache_dir=None, log_every: int = 0):
    """Warmed, frozen LVLM state for ``seed`` (cached on disk when ``cache_dir`` is given)."""
    key = _key("lvlm", cfg.lvlm, cfg.pretrain, cfg.n_pretrain, cfg.n_gate, seed)
    path = Path(cache_dir) / f"lvlm-{key}.ckpt" if cache_dir else None
    if path is not None and path.exists():
        state, meta = io.load_checkpoint(path)
        return state, meta
    lvlm = build_models(seed, cfg.lvlm, cfg.caption, cfg.selector).lvlm
    data = gen_synthetic_dataset(seed, cfg.n_pretrain, "pretrain")
    gate = gen_synthetic_dataset(seed + 7777, cfg.n_gate, "eval")
    log: list = []
    acc, rounds = warm_up_lvlm(lvlm, data, gate, cfg.pretrain, seed, log, log_every)
    meta = {"lvlm_accuracy": acc, "extra_rounds": rounds, "seed": seed, "log": log}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        io.save_checkpoint(path, lvlm.state_dict(), meta)
    return lvlm.state_dict(), meta


@dataclass
class SeedArtifacts:
    seed: int
    models: Models
    warmup: dict
    records: list
    dpo_report: dict
    eval_set: list


def build_preferences(samples, models: Models, rates, pool: int, strategy: str = "cls_text"):
    """One KL-scored record per usable sample; rates cycle over the samples."""
    lvlm, cap = models.lvlm, models.captioner
    records, feats = [], {}
    from ..pruner import PruneConfig

    for i, s in enumerate(samples):
        v = lvlm.encode_image(s.image)
        full = lvlm.connect(v)
        pr = prune(v, s.question, lvlm, PruneConfig(rates[i % len(rates)], strategy))
        if len(pr.discarded) == 0:
            continue
        cs = cap.generate_captions(pr.v_l, s.question, beams=pool)
        recs = build_preference_pairs(s.sample_id, s.question, lvlm, full, pr, cs)
        if recs:
            feats[s.sample_id] = v.patches
            records.extend(recs)
    return records, feats


def prepare_seed(cfg: RunConfig, seed: int, cache_dir=None, log_every: int = 0) -> SeedArtifacts:
    """Warm-up, preference construction and DPO for one seed."""
    models = build_models(seed, cfg.lvlm, cfg.caption, cfg.selector)
    lvlm_seed = seed if cfg.lvlm_seed is None else cfg.lvlm_seed
    state, meta = get_lvlm_state(cfg, lvlm_seed, cache_dir, log_every)
    models.lvlm.load_state_dict(state)
    models.lvlm.set_trainable(False)

    key = _key("comp", cfg.to_dict(), seed)
    path = Path(cache_dir) / f"models-{key}.ckpt" if cache_dir else None
    eval_set = gen_synthetic_dataset(seed, cfg.n_eval, "eval")
    if path is not None and path.exists():
        cached = io.load_models_into(path, models)
        models.captioner.set_trainable(False)
        models.selector.set_trainable(False)
        records = [_record(r) for r in cached["records"]]
        return SeedArtifacts(seed, models, cached["warmup"], records, cached["dpo"], eval_set)

    data = gen_synthetic_dataset(seed, cfg.n_pretrain, "pretrain")
    log: list = []
    warm_up_compensators(models, data, cfg.pretrain, seed, log, log_every)
    warmup = {"lvlm_accuracy": meta["lvlm_accuracy"], "lvlm_seed": lvlm_seed,
              "checksums": models.checksums(), "log": log}

    train_set = gen_synthetic_dataset(seed, cfg.n_train, "train")
    records, feats = build_preferences(train_set, models, cfg.pref_rates, cfg.dpo.pool,
                                       cfg.pipeline.strategy)
    n_held = max(1, len(records) // 10) if len(records) > 1 else 0
    held, fit = records[:n_held], records[n_held:] or records
    dpo_cfg = replace(cfg.dpo, seed=seed)
    report = train(fit, models.captioner, models.selector, dpo_cfg, feats, heldout=held,
                   frozen_modules=[models.lvlm], log_every=0)
    models.captioner.set_trainable(False)
    models.selector.set_trainable(False)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        io.save_models(path, models, {"warmup": warmup, "dpo": report,
                                      "records": [r.to_json() for r in records]})
    return SeedArtifacts(seed, models, warmup, records, report, eval_set)


def _record(d):
    from ..preference import PreferenceRecord

    return PreferenceRecord.from_json(d)


# ---------------------------------------------------------------------------
# evaluation tables
# ---------------------------------------------------------------------------


def _evaluate(eval_set, models: Models, pc: PipelineConfig, memo: dict | None) -> dict:
    """``evaluate`` with an optional per-model memo keyed by the pipeline config."""
    if memo is None:
        return evaluate(eval_set, models, pc)
    key = json.dumps(pc.to_dict(), sort_keys=True)
    if key not in memo:
        memo[key] = evaluate(eval_set, models, pc)
    return memo[key]


def ablation(eval_set, models: Models, cfg: PipelineConfig, config_hash: str = "",
             memo: dict | None = None) -> list:
    """Accuracy of every lattice stage at ``cfg.rate``."""
    rows = []
    for stage, flags in LATTICE:
        pc = replace(cfg, **flags)
        res = _evaluate(eval_set, models, pc, memo)
        rows.append({"stage": stage, "rate": pc.rate, "accuracy": res["accuracy"],
                     "mean_flops_ratio": res["mean_flops_ratio"],
                     "max_flops_ratio": max(r["flops_ratio"] for r in res["rows"]),
                     "config_hash": _key(config_hash, pc.to_dict()),
                     "captions": [r["caption"] for r in res["rows"]],
                     "selected": [r["selected"] for r in res["rows"]],
                     "correct": [r["correct"] for r in res["rows"]]})
    return rows


def sweep_pruning_rates(eval_set, models: Models, rates, cfg: PipelineConfig,
                        csv_path=None, plot_path=None, config_hash: str = "",
                        memo: dict | None = None) -> list:
    """Pruning-only baseline vs full compensation at each rate."""
    if list(rates) != sorted(rates):
        raise ValueError("rates must be ascending")
    rows = []
    for rate in rates:
        base = replace(cfg, rate=rate, caption=False, guidance=False, selector=False)
        full = replace(cfg, rate=rate, caption=True, guidance=True, selector=True)
        rows.append({"rate": rate,
                     "baseline": _evaluate(eval_set, models, base, memo)["accuracy"],
                     "accm": _evaluate(eval_set, models, full, memo)["accuracy"],
                     "config_hash": _key(config_hash, full.to_dict())})
    if csv_path is not None:
        Path(csv_path).write_text(curve_csv(rows))
    if plot_path is not None:
        plot_curve(rows, plot_path)
    return rows


def curve_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rate", "baseline", "accm", "config_hash"])
    for r in rows:
        w.writerow([repr(float(r["rate"])), repr(float(r["baseline"])), repr(float(r["accm"])),
                    r["config_hash"]])
    return buf.getvalue()


def plot_curve(rows, path) -> None:
    """Needs matplotlib (optional dependency)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r["rate"] for r in rows], [r["baseline"] for r in rows], "o-", label="pruning only")
    ax.plot([r["rate"] for r in rows], [r["accm"] for r in rows], "s-", label="compensated")
    ax.set_xlabel("pruning rate")
    ax.set_ylabel("exact-match accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def run_experiment(cfg: RunConfig, cache_dir=None, out_dir=None, log_every: int = 0,
                   stages=("ablation", "sweep")) -> dict:
    """Every seed's ablation table and sweep, with seed means. Deterministic for a fixed config."""
    h = cfg.config_hash()
    per_seed = []
    for seed in cfg.seeds:
        art = prepare_seed(cfg, seed, cache_dir, log_every)
        entry = {"seed": seed, "lvlm_accuracy": art.warmup["lvlm_accuracy"],
                 "n_records": len(art.records),
                 "dpo_final_loss": art.dpo_report["steps"][-1]["loss"] if art.dpo_report["steps"] else None,
                 "dpo_heldout": art.dpo_report.get("heldout"),
                 "unpruned_accuracy": lvlm_accuracy(art.models.lvlm, art.eval_set)}
        memo: dict = {}  # the sweep revisits configs the ablation already ran
        if "ablation" in stages:
            entry["ablation"] = ablation(art.eval_set, art.models, cfg.pipeline, h, memo)
        if "sweep" in stages:
            entry["sweep"] = sweep_pruning_rates(art.eval_set, art.models, cfg.sweep_rates,
                                                 cfg.pipeline, config_hash=h, memo=memo)
        per_seed.append(entry)
    report = {"config": cfg.to_dict(), "config_hash": h, "seeds": per_seed}
    if "ablation" in stages:
        report["ablation_mean"] = {
            stage: float(np.mean([[r for r in e["ablation"] if r["stage"] == stage][0]["accuracy"]
                                  for e in per_seed]))
            for stage, _ in LATTICE}
    if "sweep" in stages:
        report["sweep_mean"] = [
            {"rate": rate,
             "baseline": float(np.mean([e["sweep"][i]["baseline"] for e in per_seed])),
             "accm": float(np.mean([e["sweep"][i]["accm"] for e in per_seed]))}
            for i, rate in enumerate(cfg.sweep_rates)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "report.json", report)
        if "sweep" in stages:
            (out / "sweep.csv").write_text(curve_csv(
                [dict(r, config_hash=h) for r in report["sweep_mean"]]))
    return report
