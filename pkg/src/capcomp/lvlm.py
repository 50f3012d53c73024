"""Frozen miniature vision-language model: vision encoder, connector, causal LM."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from . import vocab
from .nn import MLP, Embedding, Linear, Module, Transformer
from .numerics import Tensor


class ConfigError(ValueError):
    pass


class ContextOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class LvlmConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 4
    d_v: int = 32
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    max_len: int = 12
    enc_layers: int = 1
    max_context: int = 64
    prefix_attention: bool = True  # conditioning tokens attend to each other both ways

    def __post_init__(self):
        for name in ("image_size", "channels", "patch", "d_v", "d_model", "layers", "heads",
                     "vocab_size", "max_len", "enc_layers", "max_context"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads or self.d_v % self.heads:
            raise ConfigError(f"widths d_model={self.d_model}, d_v={self.d_v} must be divisible "
                              f"by heads={self.heads}")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyImage:
    grid: np.ndarray  # (H, W, C) in [0, 1]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValueError(f"image grid must be H×W×C, got shape {self.grid.shape}")
        if self.grid.min() < 0.0 or self.grid.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")


@dataclass
class VisualSequence:
    cls: np.ndarray  # (d_v,)
    patches: np.ndarray  # (N, d_v)

    @property
    def n(self) -> int:
        return self.patches.shape[0]


@dataclass
class DistributionTrace:
    """Next-token distributions at each emitted position, plus the emitted ids."""

    probs: np.ndarray  # (L, |Σ|)
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, patch*patch*C), patches in raster order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}×{w} not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisionEncoder(Module):
    """Patch embedding + learned positions + [cls] + bidirectional transformer."""

    def __init__(self, cfg: LvlmConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.d_v, rng)
        self.pos = Tensor(rng.normal(0, 0.3, (cfg.n_patches, cfg.d_v)), requires_grad=True)
        self.cls = Tensor(rng.normal(0, 0.3, (1, cfg.d_v)), requires_grad=True)
        self.body = Transformer(cfg.enc_layers, cfg.d_v, cfg.heads, 4 * cfg.d_v, rng, causal=False)

    def embed_patches(self, images: np.ndarray, positional: bool = True) -> Tensor:
        x = self.patch_embed(patchify(np.asarray(images, dtype=np.float64), self.cfg.patch))
        return nx.add(x, self.pos) if positional else x

    def __call__(self, images: np.ndarray, positional: bool = True) -> Tensor:
        """(B, H, W, C) -> (B, 1 + N, d_v); index 0 is [cls]."""
        x = self.embed_patches(images, positional)
        b = x.shape[0]
        cls = nx.take(self.cls, np.zeros((b, 1), dtype=np.int64), axis=0)
        return self.body(nx.concat([cls, x], axis=1))


class Connector(Module):
    """Per-token two-layer MLP from the vision width to the LM width."""

    def __init__(self, cfg: LvlmConfig, rng: np.random.Generator):
        super().__init__()
        self.mlp = MLP(cfg.d_v, cfg.d_model, cfg.d_model, rng)

    def __call__(self, x, activation: bool = True) -> Tensor:
        return self.mlp(x, activation)


class LanguageModel(Module):
    """Causal decoder over embedding sequences with learned absolute positions."""

    def __init__(self, vocab_size: int, d: int, layers: int, heads: int, max_context: int,
                 rng: np.random.Generator, causal: bool = True):
        super().__init__()
        self.max_context = max_context
        self.tok_emb = Embedding(vocab_size, d, rng)
        self.pos = Tensor(rng.normal(0, 0.1, (max_context, d)), requires_grad=True)
        self.body = Transformer(layers, d, heads, 4 * d, rng, causal=causal)
        self.head = Linear(d, vocab_size, rng)

    def embed_ids(self, ids) -> Tensor:
        return self.tok_emb(np.asarray(ids, dtype=np.int64))

    def hidden(self, x: Tensor, key_mask=None, upto: int | None = None, prefix_len=None) -> Tensor:
        t = x.shape[1]
        if t > self.max_context:
            raise ContextOverflowError(f"sequence length {t} exceeds context {self.max_context}")
        pos = nx.take(self.pos, np.arange(t), axis=0)
        return self.body(nx.add(x, pos), key_mask=key_mask, upto=upto, prefix_len=prefix_len)

    def __call__(self, x: Tensor, key_mask=None, prefix_len=None) -> Tensor:
        """(B, T, d) embeddings -> (B, T, |Σ|) logits."""
        return self.head(self.hidden(x, key_mask, prefix_len=prefix_len))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ToyLVLM(Module):
    """Vision encoder + connector + LM; inference methods never touch parameters."""

    def __init__(self, cfg: LvlmConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or LvlmConfig()
        rng = np.random.default_rng(seed)
        self.encoder = VisionEncoder(cfg, rng)
        self.connector = Connector(cfg, rng)
        self.lm = LanguageModel(cfg.vocab_size, cfg.d_model, cfg.layers, cfg.heads,
                                cfg.max_context, rng)
        # Frozen map from LM token embeddings into the vision width (pruning scores).
        self.text_proj = Tensor(rng.normal(0, 1.0 / np.sqrt(cfg.d_model), (cfg.d_model, cfg.d_v)))

    # -- vision side -------------------------------------------------------
    def encode_image(self, img: ToyImage, positional: bool = True) -> VisualSequence:
        grid = img.grid if isinstance(img, ToyImage) else np.asarray(img)
        if grid.shape[0] % self.cfg.patch or grid.shape[1] % self.cfg.patch:
            raise ConfigError(f"image {grid.shape[:2]} not divisible by patch {self.cfg.patch}")
        out = self.encoder(grid[None], positional=positional).data[0]
        return VisualSequence(cls=out[0].copy(), patches=out[1:].copy())

    def encode_batch(self, grids: np.ndarray) -> list[VisualSequence]:
        out = self.encoder(np.asarray(grids)).data
        return [VisualSequence(cls=o[0].copy(), patches=o[1:].copy()) for o in out]

    def connect(self, v: VisualSequence | np.ndarray, activation: bool = True) -> np.ndarray:
        patches = v.patches if isinstance(v, VisualSequence) else np.asarray(v)
        return self.connector(patches, activation).data

    def connect_cls(self, v: VisualSequence) -> np.ndarray:
        return self.connector(v.cls[None]).data[0]

    def question_embedding(self, q) -> np.ndarray:
        """Mean LM embedding of ``q`` mapped into the vision width."""
        if len(q) == 0:
            return np.zeros(self.cfg.d_v)
        emb = self.lm.tok_emb.weight.data[np.asarray(q, dtype=np.int64)].mean(axis=0)
        return emb @ self.text_proj.data

    # -- language side -----------------------------------------------------
    def _prefix(self, v_tokens, m_s, q) -> np.ndarray:
        vocab.check_ids(list(m_s) + list(q), self.cfg.vocab_size)
        parts = [np.asarray(v_tokens, dtype=np.float64).reshape(-1, self.cfg.d_model)]
        emb = self.lm.tok_emb.weight.data
        if len(m_s):
            parts.append(emb[np.asarray(m_s, dtype=np.int64)])
        if len(q):
            parts.append(emb[np.asarray(q, dtype=np.int64)])
        return np.concatenate(parts, axis=0)

    def input_length(self, n_visual: int, m_s, q) -> int:
        return n_visual + len(m_s) + len(q)

    def _logits(self, seq: np.ndarray, n_prefix: int) -> np.ndarray:
        pl = n_prefix if self.cfg.prefix_attention else None
        return self.lm(Tensor._wrap(seq[None]), prefix_len=pl).data[0]

    def _decode(self, prefix: np.ndarray, max_len: int):
        if max_len <= 0:
            return [], DistributionTrace(np.zeros((0, self.cfg.vocab_size)), [])
        if len(prefix) == 0:
            raise ValueError("generation needs a non-empty conditioning sequence")
        if len(prefix) + max_len - 1 > self.cfg.max_context:
            raise ContextOverflowError(
                f"input of {len(prefix)} tokens plus {max_len} answer tokens exceeds context "
                f"{self.cfg.max_context}")
        emb = self.lm.tok_emb.weight.data
        seq = prefix
        ids: list[int] = []
        rows = []
        for _ in range(max_len):
            p = _softmax_rows(self._logits(seq, len(prefix))[-1])
            rows.append(p)
            nxt = int(np.argmax(p))  # first maximum: lowest id wins ties
            ids.append(nxt)
            if nxt == vocab.EOS:
                break
            seq = np.concatenate([seq, emb[nxt][None]], axis=0)
        return ids, DistributionTrace(np.stack(rows), list(ids))

    def generate(self, v_tokens, q, max_len: int | None = None):
        """Greedy answer for [V; Q]; returns (ids, trace)."""
        max_len = self.cfg.max_len if max_len is None else max_len
        return self._decode(self._prefix(v_tokens, [], q), max_len)

    def generate_compensated(self, v_r_tokens, m_s, q, max_len: int | None = None):
        """Greedy answer for [V_r; m_s; Q]; a trailing EOS on m_s is dropped."""
        max_len = self.cfg.max_len if max_len is None else max_len
        return self._decode(self._prefix(v_r_tokens, vocab.strip_eos(m_s), q), max_len)

    def teacher_forced_trace(self, v_tokens, m_s, q, answer_ids) -> DistributionTrace:
        """Distributions at each position of ``answer_ids`` when those ids are fed in."""
        prefix = self._prefix(v_tokens, vocab.strip_eos(m_s), q)
        answer_ids = list(answer_ids)
        if not answer_ids:
            return DistributionTrace(np.zeros((0, self.cfg.vocab_size)), [])
        emb = self.lm.tok_emb.weight.data
        seq = np.concatenate([prefix, emb[np.asarray(answer_ids[:-1], dtype=np.int64)]], axis=0)
        if len(seq) > self.cfg.max_context:
            raise ContextOverflowError(f"sequence length {len(seq)} exceeds context")
        logits = self._logits(seq, len(prefix))[len(prefix) - 1:]
        return DistributionTrace(_softmax_rows(logits), answer_ids)

    def attention_map(self, v_tokens, q, layer: int) -> np.ndarray:
        """Head-wise attention weights (H, T, T) of LM block ``layer`` (1-based) on [V; Q]."""
        if self.cfg.layers < layer:
            raise ConfigError(f"LM has {self.cfg.layers} layers; layer {layer} requested")
        seq = self._prefix(v_tokens, [], q)
        x = Tensor._wrap(seq[None])
        pl = len(seq) if self.cfg.prefix_attention else None
        h = self.lm.hidden(x, upto=layer - 1, prefix_len=pl)
        return self.lm.body.blocks[layer - 1].attention_map(h, prefix_len=pl)[0]
