"""Visual-token pruning: relevance scoring and retained/discarded partitioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lvlm import ConfigError, ToyLVLM, VisualSequence

STRATEGIES = ("cls_text", "attention", "random")


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    """``rate`` is the fraction of visual tokens removed."""

    rate: float = 0.9375
    strategy: str = "cls_text"
    seed: int = 0
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise PruneError(f"pruning rate must lie in [0, 1), got {self.rate}")
        if self.strategy not in STRATEGIES:
            raise PruneError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.lam <= 1.0:
            raise PruneError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class PruneResult:
    retained: np.ndarray  # ascending indices
    discarded: np.ndarray  # ascending indices
    v_r: np.ndarray
    v_l: np.ndarray
    scores: np.ndarray
    rate_applied: float

    @property
    def n(self) -> int:
        return len(self.retained) + len(self.discarded)


def retained_count(n: int, rate: float) -> int:
    """round((1 - rate) * n), never below one token."""
    if not 0.0 <= rate < 1.0:
        raise PruneError(f"pruning rate must lie in [0, 1), got {rate}")
    if n < 1:
        raise PruneError("cannot prune an empty visual sequence")
    return max(1, int(round((1.0 - rate) * n)))


def _cos_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine of each row of ``x`` with vector ``y``; zero-norm cases give 0."""
    nx_ = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y)
    out = np.zeros(len(x))
    ok = (nx_ > 0) & (ny > 0)
    out[ok] = (x[ok] @ y) / (nx_[ok] * ny)
    return out


def score_cls_text(v: VisualSequence, q_emb: np.ndarray, lam: float = 0.5) -> np.ndarray:
    """lam·cos(patch, cls) + (1 - lam)·cos(patch, question embedding)."""
    return lam * _cos_rows(v.patches, v.cls) + (1.0 - lam) * _cos_rows(v.patches, np.asarray(q_emb))


def score_attention(v_tokens: np.ndarray, q, lvlm: ToyLVLM, layer: int = 2) -> np.ndarray:
    """Mean attention each visual token receives at LM layer ``layer``, over heads and queries."""
    if lvlm.cfg.layers < 2:
        raise ConfigError("attention scoring needs an LM with at least 2 layers")
    attn = lvlm.attention_map(v_tokens, q, layer)  # (H, T, T)
    n = np.asarray(v_tokens).reshape(-1, lvlm.cfg.d_model).shape[0]
    return attn[:, :, :n].mean(axis=(0, 1))


def score_random(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random(n)


def partition(v: VisualSequence | np.ndarray, scores, cfg: PruneConfig) -> PruneResult:
    """Keep the highest-scoring tokens (ties to the lower index), both sides in spatial order."""
    patches = v.patches if isinstance(v, VisualSequence) else np.asarray(v)
    scores = np.asarray(scores, dtype=np.float64)
    n = patches.shape[0]
    if scores.shape != (n,):
        raise PruneError(f"expected {n} scores, got shape {scores.shape}")
    k = retained_count(n, cfg.rate)
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((np.arange(n), -scores))
    keep = np.zeros(n, dtype=bool)
    keep[order[:k]] = True
    retained = np.flatnonzero(keep)
    discarded = np.flatnonzero(~keep)
    return PruneResult(retained, discarded, patches[retained], patches[discarded], scores, cfg.rate)


def prune(v: VisualSequence, q, lvlm: ToyLVLM, cfg: PruneConfig) -> PruneResult:
    """Score with the configured strategy and partition the encoder tokens."""
    if cfg.strategy == "cls_text":
        scores = score_cls_text(v, lvlm.question_embedding(q), cfg.lam)
    elif cfg.strategy == "attention":
        scores = score_attention(lvlm.connect(v), q, lvlm)
    else:
        scores = score_random(v.n, cfg.seed)
    return partition(v, scores, cfg)
