"""Caption selector: frozen text encoder over question-caption pairs + learnable classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from . import vocab
from .lvlm import ContextOverflowError
from .nn import Embedding, Linear, Module, Transformer
from .numerics import Tensor


@dataclass(frozen=True)
class SelectorConfig:
    d_z: int = 32
    text_layers: int = 2
    classifier_layers: int = 4
    heads: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    max_context: int = 48

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectionResult:
    index: int
    probs: np.ndarray
    caption: list | None = None

    def one_hot(self) -> np.ndarray:
        out = np.zeros(len(self.probs))
        out[self.index] = 1.0
        return out


class TextEncoder(Module):
    """Bidirectional transformer; the summary is the hidden state at the EOS slot."""

    def __init__(self, cfg: SelectorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = Embedding(cfg.vocab_size, cfg.d_z, rng)
        self.pos = Tensor(rng.normal(0, 0.1, (cfg.max_context, cfg.d_z)), requires_grad=True)
        self.body = Transformer(cfg.text_layers, cfg.d_z, cfg.heads, 4 * cfg.d_z, rng, causal=False)

    def pair_ids(self, q, m) -> list[int]:
        return list(q) + vocab.strip_eos(m) + [vocab.EOS]

    def __call__(self, seqs) -> Tensor:
        """Encode token lists (each ending on EOS); returns (len(seqs), d_z) readouts."""
        lens = [len(s) for s in seqs]
        t = max(lens)
        if t > self.cfg.max_context:
            raise ContextOverflowError(f"pair of {t} tokens exceeds text encoder context "
                                       f"{self.cfg.max_context}")
        ids = np.zeros((len(seqs), t), dtype=np.int64)
        mask = np.zeros((len(seqs), t), dtype=bool)
        for i, s in enumerate(seqs):
            vocab.check_ids(s, self.cfg.vocab_size)
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        x = nx.add(self.tok_emb(ids), nx.take(self.pos, np.arange(t), axis=0))
        h = self.body(x, key_mask=mask)
        flat = nx.reshape(h, (len(seqs) * t, self.cfg.d_z))
        return nx.take(flat, np.arange(len(seqs)) * t + np.asarray(lens) - 1, axis=0)


class Classifier(Module):
    """Transformer across the candidate axis (no positions) + one logit per candidate."""

    def __init__(self, cfg: SelectorConfig, rng: np.random.Generator):
        super().__init__()
        self.body = Transformer(cfg.classifier_layers, cfg.d_z, cfg.heads, 4 * cfg.d_z, rng,
                                causal=False)
        self.head = Linear(cfg.d_z, 1, rng)

    def __call__(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=np.float64))
        b, d = z.shape
        return nx.reshape(self.batch(nx.reshape(z, (1, b, d))), (b,))

    def batch(self, z: Tensor) -> Tensor:
        """(G, B, d_z) -> (G, B) logits; groups are independent candidate sets."""
        g, b, d = z.shape
        h = self.body(z)
        # row-wise dot product: identical candidates get bit-identical logits, which a
        # (.., d) @ (d, 1) BLAS call does not guarantee
        w = nx.reshape(self.head.weight, (d,))
        return nx.add(nx.tsum(nx.mul(h, w), axis=-1), nx.reshape(self.head.bias, ()))


class SelectorModel(Module):
    def __init__(self, cfg: SelectorConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or SelectorConfig()
        rng = np.random.default_rng(seed + 104729)
        self.text_encoder = TextEncoder(cfg, rng)
        self.classifier = Classifier(cfg, rng)
        self.text_encoder.set_trainable(False)

    def encode_pairs(self, q, captions) -> np.ndarray:
        """(B, d_z) EOS readouts of concat[Q; m_i; EOS], rows in caption order."""
        captions = captions.captions if hasattr(captions, "captions") else captions
        if len(captions) < 1:
            raise ValueError("need at least one caption")
        seqs = [self.text_encoder.pair_ids(q, m) for m in captions]
        return self.text_encoder(seqs).data

    def logits(self, z) -> Tensor:
        """(B, d_z) -> (B,) or, for stacked candidate sets, (G, B, d_z) -> (G, B)."""
        if np.ndim(z.data if isinstance(z, Tensor) else z) == 3:
            z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=np.float64))
            return self.classifier.batch(z)
        return self.classifier(z)

    def select(self, z, captions=None) -> SelectionResult:
        logits = self.logits(z)
        probs = nx.softmax(logits).data
        idx = int(np.argmax(probs))  # lowest index among exact ties
        cap = None if captions is None else list(captions[idx])
        return SelectionResult(idx, probs, cap)

    def select_logprob(self, z, i: int) -> Tensor:
        b = np.asarray(z.data if isinstance(z, Tensor) else z).shape[0]
        if not 0 <= i < b:
            raise IndexError(f"candidate index {i} out of range for {b} candidates")
        return nx.reshape(nx.take(nx.log_softmax(self.logits(z)), np.array([i]), axis=0), ())
