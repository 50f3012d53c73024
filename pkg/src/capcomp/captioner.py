"""Question-guided caption model over discarded visual tokens, with beam search."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from . import vocab
from .lvlm import ContextOverflowError, LanguageModel, VisionEncoder
from .nn import MLP, Module
from .numerics import Tensor


@dataclass(frozen=True)
class CaptionConfig:
    d_v: int = 32
    d_cap: int = 32
    layers: int = 2
    heads: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    max_context: int = 64
    max_len: int = 7

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CaptionSet:
    captions: list  # token lists, EOS kept when the hypothesis ended on it
    logprobs: list
    q: list = field(default_factory=list)
    v_l: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.captions)


def beam_search(decoder, width: int, max_len: int, num_return: int | None = None,
                eos: int | None = vocab.EOS):
    """Length-terminated beam search with nested beams.

    ``decoder(prefixes)`` returns a (len(prefixes), |Σ|) array of next-token
    log-probabilities. Hypotheses end at ``eos`` or at ``max_len`` tokens and
    are scored by the raw sum of token log-probabilities.

    Beams are nested: level k of the beam holds the best expansion of the first
    k beams of the previous step not already chosen by a lower level, so the
    width-w beam always contains the width-(w-1) beam. Width 1 is greedy
    decoding, and widening never lowers any of the returned scores.
    Returns up to ``num_return`` (default ``width``) (ids, score) pairs sorted by
    descending score, ties broken by lexicographic token order.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    k_ret = width if num_return is None else num_return
    alive: list[tuple[tuple, float]] = [((), 0.0)]
    finished: list[tuple[tuple, float]] = []
    for step in range(max_len):
        rows = np.asarray(decoder([seq for seq, _ in alive]), dtype=np.float64)
        # per-beam children sorted best-first (ties: lower token id)
        orders = [np.lexsort((np.arange(r.size), -r)) for r in rows]
        ptr = [0] * len(alive)
        new_alive = []
        for level in range(width):
            scope = min(level + 1, len(alive))
            best = None
            for j in range(scope):
                if ptr[j] >= rows.shape[1]:
                    continue
                tok = int(orders[j][ptr[j]])
                cand = (alive[j][1] + float(rows[j, tok]), alive[j][0] + (tok,), j)
                if best is None or cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                    best = cand
            if best is None:
                break
            score, seq, j = best
            ptr[j] += 1
            if (eos is not None and seq[-1] == eos) or step + 1 == max_len:
                finished.append((seq, score))
            else:
                new_alive.append((seq, score))
        alive = new_alive
        if not alive:
            break
        if len(finished) >= k_ret:
            kth = sorted(s for _, s in finished)[-k_ret]
            if max(s for _, s in alive) < kth:
                break
    finished.sort(key=lambda h: (-h[1], h[0]))
    return [(list(seq), score) for seq, score in finished[:k_ret]]


class CaptionModel(Module):
    """Projector + causal caption LM reading [Q; V_l; <bos>] (vision encoder aliased)."""

    def __init__(self, cfg: CaptionConfig | None = None, encoder: VisionEncoder | None = None,
                 seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or CaptionConfig()
        rng = np.random.default_rng(seed + 7919)
        # aliased, not registered: never copied, saved or trained here
        object.__setattr__(self, "encoder", encoder)
        self.projector = MLP(cfg.d_v, cfg.d_cap, cfg.d_cap, rng)
        self.lm = LanguageModel(cfg.vocab_size, cfg.d_cap, cfg.layers, cfg.heads,
                                cfg.max_context, rng)

    def lm_parameters(self) -> list[Tensor]:
        return self.lm.parameters()

    def frozen_checksum(self) -> str:
        return self.projector.checksum()

    # -- sequence assembly -------------------------------------------------
    def _cond(self, v_l: np.ndarray, q) -> np.ndarray:
        """Conditioning prefix embeddings [Q; proj(V_l); <bos>] (no tape)."""
        emb = self.lm.tok_emb.weight.data
        parts = []
        if len(q):
            parts.append(emb[np.asarray(q, dtype=np.int64)])
        if len(v_l):
            parts.append(self.projector(np.asarray(v_l, dtype=np.float64)).data)
        parts.append(emb[[vocab.BOS]])
        out = np.concatenate(parts, axis=0)
        if len(out) + self.cfg.max_len - 1 > self.cfg.max_context:
            raise ContextOverflowError(f"caption conditioning of {len(out)} tokens exceeds context")
        return out

    def decoder_for(self, v_l: np.ndarray, q):
        """Batched next-token log-prob function for :func:`beam_search`."""
        prefix = self._cond(v_l, q)
        emb = self.lm.tok_emb.weight.data

        def decode(prefixes):
            lens = [len(p) for p in prefixes]
            t = len(prefix) + max(lens)
            x = np.zeros((len(prefixes), t, self.cfg.d_cap))
            for i, p in enumerate(prefixes):
                x[i, : len(prefix)] = prefix
                if p:
                    x[i, len(prefix): len(prefix) + len(p)] = emb[np.asarray(p, dtype=np.int64)]
            logits = self.lm(Tensor._wrap(x)).data
            last = logits[np.arange(len(prefixes)), [len(prefix) + n - 1 for n in lens]]
            return nx.log_softmax(Tensor._wrap(last), axis=-1).data

        return decode

    def batch_logprobs(self, items) -> Tensor:
        """Teacher-forced caption log-likelihoods for ``items`` = [(v_l, q, caption_ids)].

        Records on the active tape; returns a (B,) Tensor. Every caption token
        (including a trailing EOS) is scored.
        """
        emb_w = self.lm.tok_emb.weight
        texts: list[int] = []
        vis_rows: list[np.ndarray] = []
        layouts = []
        n_vis = 0
        for v_l, q, cap in items:
            cap = list(cap)
            if not cap:
                raise ValueError("caption must be non-empty")
            vocab.check_ids(cap + list(q), self.cfg.vocab_size)
            v_l = np.asarray(v_l, dtype=np.float64).reshape(-1, self.cfg.d_v)
            layouts.append((len(q), len(v_l), cap, n_vis, len(texts)))
            vis_rows.append(v_l)
            n_vis += len(v_l)
            texts.extend(list(q) + [vocab.BOS] + cap[:-1])
        t_max = max(lq + lv + len(c) for lq, lv, c, _, _ in layouts)
        if t_max > self.cfg.max_context:
            raise ContextOverflowError(f"caption sequence of {t_max} tokens exceeds context")
        # gather table rows: [projected visual rows; text embeddings; zero pad]
        parts = []
        if n_vis:
            parts.append(self.projector(np.concatenate(vis_rows, axis=0)))
        parts.append(nx.take(emb_w, np.asarray(texts, dtype=np.int64), axis=0))
        parts.append(Tensor._wrap(np.zeros((1, self.cfg.d_cap))))
        table = nx.concat(parts, axis=0)
        pad_row = n_vis + len(texts)
        b = len(items)
        idx = np.full((b, t_max), pad_row, dtype=np.int64)
        targets = np.zeros((b, t_max), dtype=np.int64)
        mask = np.zeros((b, t_max))
        for i, (lq, lv, cap, v0, t0) in enumerate(layouts):
            text_base = n_vis + t0
            idx[i, :lq] = text_base + np.arange(lq)
            idx[i, lq: lq + lv] = v0 + np.arange(lv)
            tail = len(cap)  # <bos> + cap[:-1]
            idx[i, lq + lv: lq + lv + tail] = text_base + lq + np.arange(tail)
            targets[i, lq + lv: lq + lv + tail] = cap
            mask[i, lq + lv: lq + lv + tail] = 1.0
        h = self.lm.hidden(nx.take(table, idx, axis=0))
        # the vocabulary head only runs at scored positions
        rows = np.flatnonzero(mask.ravel())
        h = nx.take(nx.reshape(h, (b * t_max, self.cfg.d_cap)), rows, axis=0)
        tok = nx.pick(nx.log_softmax(self.lm.head(h), axis=-1), targets.ravel()[rows])
        owner = np.zeros((b, len(rows)))
        owner[rows // t_max, np.arange(len(rows))] = 1.0
        return nx.reshape(nx.matmul(Tensor._wrap(owner), nx.reshape(tok, (len(rows), 1))), (b,))

    def caption_logprob(self, m, v_l: np.ndarray, q) -> Tensor:
        """Scalar teacher-forced log C(m | V_l, Q); differentiable in the LM parameters."""
        return nx.reshape(self.batch_logprobs([(v_l, q, m)]), ())

    # -- inference -----------------------------------------------------------
    def generate_captions(self, v_l: np.ndarray, q, beams: int = 3, max_len: int | None = None,
                          num_return: int | None = None) -> CaptionSet:
        max_len = self.cfg.max_len if max_len is None else max_len
        if beams < 1:
            raise ValueError("need at least one beam")
        v_l = np.asarray(v_l, dtype=np.float64).reshape(-1, self.cfg.d_v)
        want = beams if num_return is None else num_return
        if len(v_l) == 0:
            warnings.warn("no discarded tokens: returning a single empty caption")
            return CaptionSet([[]], [0.0], list(q), v_l, ["empty_discarded"])
        hyps = beam_search(self.decoder_for(v_l, q), beams, max_len, num_return=want)
        flags = []
        if len(hyps) < want:
            flags.append("fewer_candidates")
            warnings.warn(f"only {len(hyps)} distinct captions reachable (asked for {want})")
        return CaptionSet([h for h, _ in hyps], [s for _, s in hyps], list(q), v_l, flags)

    def greedy_caption(self, v_l: np.ndarray, q, max_len: int | None = None):
        """Plain argmax decoding, independent of :func:`beam_search`."""
        max_len = self.cfg.max_len if max_len is None else max_len
        decode = self.decoder_for(np.asarray(v_l).reshape(-1, self.cfg.d_v), q)
        ids: list[int] = []
        score = 0.0
        for _ in range(max_len):
            row = decode([tuple(ids)])[0]
            tok = int(np.argmax(row))
            score += float(row[tok])
            ids.append(tok)
            if tok == vocab.EOS:
                break
        return ids, score
