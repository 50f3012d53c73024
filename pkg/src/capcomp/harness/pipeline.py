"""One sample through prune -> caption -> select -> compensated answer."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import vocab
from ..flops import FlopsReport, RunShape, pipeline_flops, reference_profile, toy_profile
from ..pruner import PruneConfig, prune, retained_count
from .data import SyntheticSample
from .pretrain import Models


@dataclass(frozen=True)
class PipelineConfig:
    rate: float = 0.9375
    strategy: str = "cls_text"
    beams: int = 3
    caption: bool = True
    guidance: bool = True
    selector: bool = True
    lam: float = 0.5
    prune_seed: int = 0
    flops_profile: str = "reference"  # or "toy"

    def __post_init__(self):
        PruneConfig(self.rate, self.strategy, self.prune_seed, self.lam)  # validates
        if self.beams < 1:
            raise ValueError("need at least one beam")
        if (self.guidance or self.selector) and not self.caption:
            raise ValueError("guidance and selector flags need caption=True")
        if self.flops_profile not in ("reference", "toy"):
            raise ValueError(f"unknown FLOPs profile {self.flops_profile!r}")

    @property
    def prune_cfg(self) -> PruneConfig:
        return PruneConfig(self.rate, self.strategy, self.prune_seed, self.lam)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    answer: list
    trace: object
    flops: FlopsReport
    artifacts: dict = field(default_factory=dict)

    def correct(self, sample: SyntheticSample) -> bool:
        return list(self.answer) == list(sample.answer)


def run_shape(cfg: PipelineConfig, n_visual: int, retained: int, q_len: int, answer_len: int,
              caption=(), candidates=()) -> RunShape:
    return RunShape(retained=retained, question_len=q_len, answer_len=answer_len,
                    caption_len=len(vocab.strip_eos(caption)),
                    beams=cfg.beams if cfg.caption else 0,
                    candidate_len=max((len(c) for c in candidates), default=0),
                    guided=cfg.guidance, selector=cfg.selector)


def flops_for(cfg: PipelineConfig, models: Models, q_len: int, answer_len: int, caption=(),
              candidates=()) -> FlopsReport:
    """FLOPs of a run from its config and token counts alone."""
    if cfg.flops_profile == "toy":
        prof = toy_profile(models.lvlm.cfg, models.captioner.cfg, models.selector.cfg)
    else:
        prof = reference_profile()
    kept = retained_count(prof.n_visual, cfg.rate)
    return pipeline_flops(run_shape(cfg, prof.n_visual, kept, q_len, answer_len, caption,
                                    candidates), prof)


def run_pipeline(sample: SyntheticSample, models: Models, cfg: PipelineConfig) -> PipelineResult:
    lvlm, q = models.lvlm, list(sample.question)
    v = lvlm.encode_image(sample.image)
    full = lvlm.connect(v)
    pr = prune(v, q, lvlm, cfg.prune_cfg)
    v_r = full[pr.retained]
    art = {"retained": pr.retained.tolist(), "discarded": pr.discarded.tolist(),
           "captions": [], "caption_logprobs": [], "selected": None, "caption": [],
           "warnings": []}
    if cfg.caption:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cs = models.captioner.generate_captions(pr.v_l, q if cfg.guidance else [],
                                                    beams=cfg.beams)
        art["warnings"] = list(cs.warnings)
        idx = 0  # candidates arrive sorted by log-likelihood
        if cfg.selector and len(cs) > 1:
            sel = models.selector.select(models.selector.encode_pairs(q, cs), cs.captions)
            idx = sel.index
            art["selector_probs"] = sel.probs.tolist()
        m_s = list(cs.captions[idx])
        art.update(captions=[list(c) for c in cs.captions], caption_logprobs=list(cs.logprobs),
                   selected=idx, caption=m_s)
        answer, trace = lvlm.generate_compensated(v_r, m_s, q)
    else:
        cs = None
        answer, trace = lvlm.generate(v_r, q)
    fl = flops_for(cfg, models, len(q), len(answer), art["caption"],
                   art["captions"] if cs is not None else ())
    return PipelineResult(answer, trace, fl, art)


def evaluate(samples, models: Models, cfg: PipelineConfig) -> dict:
    """Exact-match accuracy plus per-sample rows, gathered in sample order."""
    rows = []
    for s in samples:
        r = run_pipeline(s, models, cfg)
        rows.append({"sample_id": s.sample_id, "qtype": s.qtype, "answer": r.answer,
                     "correct": bool(r.correct(s)), "caption": r.artifacts["caption"],
                     "selected": r.artifacts["selected"], "flops": r.flops.total,
                     "flops_ratio": r.flops.ratio})
    acc = float(np.mean([r["correct"] for r in rows])) if rows else 0.0
    return {"accuracy": acc, "rows": rows,
            "mean_flops_ratio": float(np.mean([r["flops_ratio"] for r in rows])) if rows else 0.0}
