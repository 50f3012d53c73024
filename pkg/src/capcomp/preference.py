"""KL-scored preference pairs and reference-free DPO for the captioner and selector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .captioner import CaptionModel
from .lvlm import DistributionTrace, ToyLVLM
from .nn import SGD, checksum_params
from .numerics import Tape, Tensor, backward
from .selector import SelectorModel

KL_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6
TIE_TOL = 1e-9


class PreferenceError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def _check_simplex(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise PreferenceError(f"{name} is not a probability vector (sum={p.sum():.9g})")


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    """KL(p‖q) = Σ p ln(p/q) with 0·ln0 = 0 and q floored at ``floor``.

    Flooring can push the raw sum a hair below zero when p itself has entries
    under the floor; the result is clamped at 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    if p.shape != q.shape:
        raise PreferenceError(f"distribution sizes differ: {p.shape} vs {q.shape}")
    nz = p > 0
    val = float(np.sum(p[nz] * np.log(p[nz] / np.maximum(q[nz], floor))))
    return max(val, 0.0)


def trace_distance(o: DistributionTrace, o0: DistributionTrace, reverse: bool = False) -> float:
    """Mean over positions of KL(o0_row ‖ o_row); ``reverse`` swaps the arguments."""
    a = o.probs if isinstance(o, DistributionTrace) else np.asarray(o)
    b = o0.probs if isinstance(o0, DistributionTrace) else np.asarray(o0)
    if a.shape != b.shape:
        raise PreferenceError(f"trace lengths differ: {a.shape} vs {b.shape}")
    if len(a) == 0:
        return 0.0
    if reverse:
        return float(np.mean([kl_divergence(x, y) for x, y in zip(a, b)]))
    return float(np.mean([kl_divergence(y, x) for x, y in zip(a, b)]))


# ---------------------------------------------------------------------------
# preference records
# ---------------------------------------------------------------------------


@dataclass
class PreferenceRecord:
    sample_id: str
    question: list
    discarded: list  # indices of V_l in the visual sequence
    captions: list  # candidate pool A
    pos: int
    neg: int
    kl_pos: float
    kl_neg: float
    distances: list = field(default_factory=list)

    def __post_init__(self):
        if not self.kl_pos < self.kl_neg:
            raise PreferenceError(f"kl_pos={self.kl_pos} must be < kl_neg={self.kl_neg}")
        if list(self.captions[self.pos]) == list(self.captions[self.neg]):
            raise PreferenceError("positive and negative captions must differ")
        if min(self.kl_pos, self.kl_neg) < 0:
            raise PreferenceError("KL distances must be nonnegative")

    @property
    def a_pos(self) -> list:
        return list(self.captions[self.pos])

    @property
    def a_neg(self) -> list:
        return list(self.captions[self.neg])

    def to_json(self) -> dict:
        d = asdict(self)
        d["a_pos"] = self.a_pos
        d["a_neg"] = self.a_neg
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PreferenceRecord":
        return cls(sample_id=d["sample_id"], question=list(d["question"]),
                   discarded=list(d["discarded"]), captions=[list(c) for c in d["captions"]],
                   pos=int(d["pos"]), neg=int(d["neg"]), kl_pos=float(d["kl_pos"]),
                   kl_neg=float(d["kl_neg"]), distances=[float(x) for x in d.get("distances", [])])


def pair_extremes(captions, distances, sample_id, question, discarded) -> PreferenceRecord | None:
    """Pair the closest caption (A⁺) with the farthest (A⁻); None when degenerate."""
    if len(captions) < 2:
        return None
    d = np.asarray(distances, dtype=np.float64)
    if d.max() - d.min() <= TIE_TOL:
        return None
    order = np.lexsort((np.arange(len(d)), d))
    pos, neg = int(order[0]), int(np.lexsort((np.arange(len(d)), -d))[0])
    if list(captions[pos]) == list(captions[neg]):
        return None
    return PreferenceRecord(str(sample_id), list(question), [int(i) for i in discarded],
                            [list(c) for c in captions], pos, neg, float(d[pos]), float(d[neg]),
                            [float(x) for x in d])


def build_preference_pairs(sample_id, question, lvlm: ToyLVLM, full_tokens, prune_result,
                           captions, retained_tokens=None, o0=None) -> list:
    """KL-score each candidate caption against the unpruned answer trace.

    ``full_tokens`` and ``retained_tokens`` are connector outputs; the compensated
    traces are teacher-forced on the unpruned answer so positions align.
    """
    captions = captions.captions if hasattr(captions, "captions") else captions
    if len(captions) < 2:
        return []
    if o0 is None:
        _, o0 = lvlm.generate(full_tokens, question)
    if retained_tokens is None:
        retained_tokens = np.asarray(full_tokens)[prune_result.retained]
    dists = [trace_distance(lvlm.teacher_forced_trace(retained_tokens, a, question, o0.ids), o0)
             for a in captions]
    rec = pair_extremes(captions, dists, sample_id, question, prune_result.discarded)
    return [] if rec is None else [rec]


# ---------------------------------------------------------------------------
# DPO objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1.0
    lr: float = 0.1
    caption_lr: float | None = 1e-3  # caption LM step size; None reuses ``lr``
    steps: int = 600
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    mode: str = "joint"  # or "sequential"
    pool: int = 4

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.mode not in ("joint", "sequential"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.lr <= 0 or (self.caption_lr is not None and self.caption_lr <= 0):
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def dpo_loss_from_logps(lp_pos, lp_neg, beta: float = 1.0) -> Tensor:
    """-ln σ(β (lp_pos - lp_neg)), elementwise."""
    return nx.mul(nx.log_sigmoid(nx.mul(nx.sub(lp_pos, lp_neg), beta)), -1.0)


def dpo_loss_value(margin: float, beta: float = 1.0) -> float:
    return float(dpo_loss_from_logps(Tensor(margin), Tensor(0.0), beta).item())


def dpo_loss_caption(record: PreferenceRecord, caption_model: CaptionModel, v_l,
                     beta: float = 1.0) -> Tensor:
    lps = caption_model.batch_logprobs([(v_l, record.question, record.a_pos),
                                        (v_l, record.question, record.a_neg)])
    pos = nx.reshape(nx.take(lps, np.array([0]), axis=0), ())
    neg = nx.reshape(nx.take(lps, np.array([1]), axis=0), ())
    return dpo_loss_from_logps(pos, neg, beta)


def _find(captions, cap) -> int:
    for i, c in enumerate(captions):
        if list(c) == list(cap):
            return i
    raise PreferenceError(f"caption {list(cap)} not among the selector candidates")


def dpo_loss_selector(record: PreferenceRecord, selector: SelectorModel, captions=None,
                      beta: float = 1.0, z=None) -> Tensor:
    captions = record.captions if captions is None else captions
    captions = captions.captions if hasattr(captions, "captions") else captions
    i_pos, i_neg = _find(captions, record.a_pos), _find(captions, record.a_neg)
    if z is None:
        z = selector.encode_pairs(record.question, captions)
    logp = nx.log_softmax(selector.logits(z))
    pos = nx.reshape(nx.take(logp, np.array([i_pos]), axis=0), ())
    neg = nx.reshape(nx.take(logp, np.array([i_neg]), axis=0), ())
    return dpo_loss_from_logps(pos, neg, beta)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _frozen_named(caption_model, selector, extra):
    named = []
    if caption_model is not None:
        named += [("captioner.projector." + n, p) for n, p in caption_model.projector.named_parameters()]
    if selector is not None:
        named += [("selector.text." + n, p) for n, p in selector.text_encoder.named_parameters()]
    for i, mod in enumerate(extra or []):
        named += [(f"extra{i}." + n, p) for n, p in mod.named_parameters()]
    return named


def _batch_losses(batch, caption_model, selector, features, z_cache, beta, use_cap, use_sel):
    zero = Tensor(0.0)
    lc = ls = zero
    if use_cap:
        items = []
        for r in batch:
            v_l = features[r.sample_id][np.asarray(r.discarded, dtype=np.int64)]
            items += [(v_l, r.question, r.a_pos), (v_l, r.question, r.a_neg)]
        lps = caption_model.batch_logprobs(items)
        n = len(batch)
        pos = nx.take(lps, np.arange(0, 2 * n, 2), axis=0)
        neg = nx.take(lps, np.arange(1, 2 * n, 2), axis=0)
        lc = nx.mean(dpo_loss_from_logps(pos, neg, beta))
    if use_sel:
        # records with equally sized pools share one classifier call
        groups: dict = {}
        for r in batch:
            groups.setdefault(len(r.captions), []).append(r)
        total = None
        for size, rs in sorted(groups.items()):
            z = Tensor._wrap(np.stack([z_cache[id(r)] for r in rs]))
            logp = nx.log_softmax(selector.logits(z), axis=-1)
            pos = nx.pick(logp, np.array([_find(r.captions, r.a_pos) for r in rs]))
            neg = nx.pick(logp, np.array([_find(r.captions, r.a_neg) for r in rs]))
            part = nx.tsum(dpo_loss_from_logps(pos, neg, beta))
            total = part if total is None else nx.add(total, part)
        ls = nx.mul(total, 1.0 / len(batch))
    return lc, ls


def train(records, caption_model: CaptionModel, selector: SelectorModel, cfg: DpoConfig,
          features: dict, heldout=None, frozen_modules=None, log_every: int = 0) -> dict:
    """Gradient descent on the summed DPO losses of the caption LM and classifier.

    ``features`` maps sample id -> (N, d_v) encoder patch embeddings.
    Frozen parameters are checksummed before and after; any change raises.
    """
    records = list(records)
    if not records:
        raise TrainingError("empty preference dataset")
    frozen = _frozen_named(caption_model, selector, frozen_modules)
    before = checksum_params(frozen)

    cap_params = caption_model.lm_parameters() if caption_model is not None else []
    sel_params = selector.classifier.parameters() if selector is not None else []
    for p in cap_params + sel_params:
        p.requires_grad = True
    for _, p in frozen:
        p.requires_grad = False
    cap_lr = cfg.lr if cfg.caption_lr is None else cfg.caption_lr
    opt_cap = SGD(cap_params, lr=cap_lr, momentum=cfg.momentum)
    opt_sel = SGD(sel_params, lr=cfg.lr, momentum=cfg.momentum)

    z_cache = {}
    if selector is not None:
        for r in list(records) + list(heldout or []):
            z_cache[id(r)] = selector.encode_pairs(r.question, r.captions)

    rng = np.random.default_rng(cfg.seed)
    history = []
    for step in range(cfg.steps):
        bs = min(cfg.batch_size, len(records))
        batch = [records[i] for i in rng.choice(len(records), size=bs, replace=False)]
        if cfg.mode == "joint":
            use_cap, use_sel = caption_model is not None, selector is not None
        else:
            first = step < cfg.steps // 2
            use_cap, use_sel = first and caption_model is not None, (not first) and selector is not None
        with Tape() as tape:
            lc, ls = _batch_losses(batch, caption_model, selector, features, z_cache, cfg.beta,
                                   use_cap, use_sel)
            loss = nx.add(lc, ls)
        if not math.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {step}: caption={lc.item()} "
                                f"selector={ls.item()}")
        if loss.requires_grad:
            backward(loss, tape, params=opt_cap.params + opt_sel.params)
            # an idle optimizer would keep coasting on its momentum
            for used, opt in ((use_cap, opt_cap), (use_sel, opt_sel)):
                if used:
                    opt.step()
                else:
                    opt.zero_grads()
        history.append({"step": step, "loss": loss.item(), "loss_caption": lc.item(),
                        "loss_selector": ls.item()})
        if log_every and step % log_every == 0:
            print(f"dpo step {step}: {history[-1]}")

    after = checksum_params(frozen)
    if after != before:
        raise TrainingError("frozen parameters changed during training")
    report = {"config": cfg.to_dict(), "steps": history, "frozen_checksum": after,
              "n_records": len(records)}
    if heldout:
        lc, ls = _batch_losses(list(heldout), caption_model, selector, features, z_cache,
                               cfg.beta, caption_model is not None, selector is not None)
        report["heldout"] = {"loss_caption": lc.item(), "loss_selector": ls.item()}
    return report
