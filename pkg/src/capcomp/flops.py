"""Analytic FLOPs and average-visual-token accounting for pruned pipelines.

Counts are exact Python integers. The default convention counts one
multiply-accumulate as one FLOP, giving the familiar per-layer cost

    4·n·d² + 2·n²·d + 2·n·d·m

(Q/K/V/O projections, the two n×n attention products, the two FFN matrices).
``mac_flops=2`` counts a multiply-accumulate as two FLOPs and doubles every
figure. Vocabulary heads, norms and softmaxes are not counted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

STAGES = ("vision_encoder", "connector", "lm_prefill", "lm_decode", "captioner", "selector")


@dataclass(frozen=True)
class ModelDims:
    """A transformer stack: ``layers`` blocks of width ``d`` with FFN width ``m``."""

    layers: int
    d: int
    m: int
    mac_flops: int = 1

    def __post_init__(self):
        if min(self.layers, self.d, self.m) < 1:
            raise ValueError(f"dims must be positive: {self}")
        if self.mac_flops not in (1, 2):
            raise ValueError("mac_flops must be 1 or 2")


@dataclass(frozen=True)
class MlpDims:
    d_in: int
    d_hidden: int
    d_out: int


def layer_flops(n: int, dims: ModelDims) -> int:
    """One decoder layer over ``n`` tokens."""
    if n < 1:
        raise ValueError("sequence length must be at least 1")
    d, m = dims.d, dims.m
    return dims.mac_flops * (4 * n * d * d + 2 * n * n * d + 2 * n * d * m)


def decode_step_flops(ctx: int, dims: ModelDims) -> int:
    """One cached decoding step for a single new token attending over ``ctx`` positions."""
    if ctx < 1:
        raise ValueError("context must hold at least one token")
    d, m = dims.d, dims.m
    return dims.mac_flops * (4 * d * d + 2 * ctx * d + 2 * d * m)


def stack_prefill(n: int, dims: ModelDims) -> int:
    return dims.layers * layer_flops(n, dims)


def stack_decode(start_ctx: int, steps: int, dims: ModelDims) -> int:
    """``steps`` cached steps, the first attending over ``start_ctx + 1`` positions."""
    return dims.layers * sum(decode_step_flops(start_ctx + j, dims) for j in range(1, steps + 1))


def mlp_flops(rows: int, dims: MlpDims, mac_flops: int = 1) -> int:
    return mac_flops * rows * (dims.d_in * dims.d_hidden + dims.d_hidden * dims.d_out)


def avg_visual_tokens(schedule) -> float:
    """Mean retained visual-token count over the LM layers."""
    schedule = list(schedule)
    if not schedule:
        raise ValueError("empty schedule")
    return sum(schedule) / len(schedule)


def fastv_schedule(n: int, retained: int, layers: int, k: int = 2) -> list[int]:
    """All ``n`` tokens for the first ``k`` layers, ``retained`` afterwards."""
    return [n] * k + [retained] * (layers - k)


@dataclass(frozen=True)
class Profile:
    """Dims of every pipeline component for one accounting scale."""

    name: str
    lm: ModelDims
    encoder: ModelDims
    connector: MlpDims
    captioner: ModelDims
    cap_projector: MlpDims
    text_encoder: ModelDims
    classifier: ModelDims
    n_visual: int

    def with_convention(self, mac_flops: int) -> "Profile":
        f = lambda x: replace(x, mac_flops=mac_flops)  # noqa: E731
        return replace(self, lm=f(self.lm), encoder=f(self.encoder), captioner=f(self.captioner),
                       text_encoder=f(self.text_encoder), classifier=f(self.classifier))


def toy_profile(lvlm_cfg=None, cap_cfg=None, sel_cfg=None) -> Profile:
    """The desk-scale models as built in this package."""
    from .captioner import CaptionConfig
    from .lvlm import LvlmConfig
    from .selector import SelectorConfig

    lc, cc, sc = lvlm_cfg or LvlmConfig(), cap_cfg or CaptionConfig(), sel_cfg or SelectorConfig()
    return Profile(
        name="toy",
        lm=ModelDims(lc.layers, lc.d_model, 4 * lc.d_model),
        encoder=ModelDims(lc.enc_layers, lc.d_v, 4 * lc.d_v),
        connector=MlpDims(lc.d_v, lc.d_model, lc.d_model),
        captioner=ModelDims(cc.layers, cc.d_cap, 4 * cc.d_cap),
        cap_projector=MlpDims(cc.d_v, cc.d_cap, cc.d_cap),
        text_encoder=ModelDims(sc.text_layers, sc.d_z, 4 * sc.d_z),
        classifier=ModelDims(sc.classifier_layers, sc.d_z, 4 * sc.d_z),
        n_visual=lc.n_patches,
    )


def reference_profile() -> Profile:
    """A 7B-class LVLM with a ViT-L/14-336 encoder, GPT-2-small captioner and CLIP-L text tower."""
    return Profile(
        name="reference",
        lm=ModelDims(32, 4096, 11008),
        encoder=ModelDims(24, 1024, 4096),
        connector=MlpDims(1024, 4096, 4096),
        captioner=ModelDims(12, 768, 3072),
        cap_projector=MlpDims(1024, 768, 768),
        text_encoder=ModelDims(12, 768, 3072),
        classifier=ModelDims(4, 768, 3072),
        n_visual=576,
    )


@dataclass(frozen=True)
class RunShape:
    """Token counts of one pipeline run."""

    retained: int
    question_len: int
    answer_len: int
    caption_len: int = 0  # tokens of the chosen caption fed to the LM
    beams: int = 0  # 0 disables the captioner
    candidate_len: int = 0  # longest generated candidate
    guided: bool = True  # captioner reads Q
    selector: bool = False

    def __post_init__(self):
        if self.retained < 1 or self.question_len < 0 or self.answer_len < 0:
            raise ValueError(f"bad token counts: {self}")


@dataclass
class FlopsReport:
    stages: dict
    total: int
    baseline_total: int
    visual_tokens: int
    caption_tokens: int
    avg_visual_tokens: float
    profile: str
    mac_flops: int
    baseline_stages: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.total / self.baseline_total

    def check(self) -> None:
        if sum(self.stages.values()) != self.total:
            raise AssertionError("stage breakdown does not sum to total")
        if sum(self.baseline_stages.values()) != self.baseline_total:
            raise AssertionError("baseline breakdown does not sum to baseline total")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self) -> str:
        """Plain-text summary in a TFLOPs / Avg Tokens layout."""
        rows = [("stage", "FLOPs", "baseline")]
        for s in STAGES:
            rows.append((s, str(self.stages.get(s, 0)), str(self.baseline_stages.get(s, 0))))
        rows.append(("total", str(self.total), str(self.baseline_total)))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.rjust(w[i]) if i else c.ljust(w[i]) for i, c in enumerate(r))
                 for r in rows]
        lines.append(f"TFLOPs {self.total / 1e12:.6f} ({self.ratio:.1%} of baseline) | "
                     f"Avg Tokens {self.avg_visual_tokens:g} | caption tokens {self.caption_tokens}")
        return "\n".join(lines)


def _stages(run: RunShape, p: Profile) -> dict:
    mac = p.lm.mac_flops
    n = p.n_visual
    st = dict.fromkeys(STAGES, 0)
    st["vision_encoder"] = stack_prefill(n + 1, p.encoder)
    st["connector"] = mlp_flops(run.retained, p.connector, mac)
    prefill = run.retained + run.caption_len + run.question_len
    st["lm_prefill"] = stack_prefill(prefill, p.lm)
    st["lm_decode"] = stack_decode(prefill, max(run.answer_len - 1, 0), p.lm)
    if run.beams:
        n_lost = n - run.retained
        cond = (run.question_len if run.guided else 0) + n_lost + 1
        steps = max(run.candidate_len - 1, 0)
        st["captioner"] = (mlp_flops(n_lost, p.cap_projector, mac)
                           + stack_prefill(cond, p.captioner)
                           + run.beams * stack_decode(cond, steps, p.captioner))
        if run.selector:
            pair = run.question_len + run.candidate_len + 1
            st["selector"] = (run.beams * stack_prefill(pair, p.text_encoder)
                              + stack_prefill(run.beams, p.classifier))
    return st


def pipeline_flops(run: RunShape, profile: Profile | None = None, mac_flops: int = 1) -> FlopsReport:
    """FLOPs of a pruned (optionally compensated) run and of its unpruned baseline."""
    p = (profile or reference_profile()).with_convention(mac_flops)
    if run.retained > p.n_visual:
        raise ValueError(f"retained {run.retained} exceeds {p.n_visual} visual tokens")
    base = _stages(RunShape(p.n_visual, run.question_len, run.answer_len), p)
    st = _stages(run, p)
    rep = FlopsReport(stages=st, total=sum(st.values()), baseline_total=sum(base.values()),
                      visual_tokens=run.retained, caption_tokens=run.caption_len,
                      avg_visual_tokens=avg_visual_tokens([run.retained] * p.lm.layers),
                      profile=p.name, mac_flops=mac_flops, baseline_stages=base)
    rep.check()
    return rep
