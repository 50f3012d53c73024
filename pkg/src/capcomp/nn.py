"""Small neural-network building blocks on top of the numeric core."""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Container that registers Tensor parameters and child modules by attribute."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        return checksum_params(self.named_parameters())

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def checksum_params(named) -> str:
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        super().__init__()
        self.weight = _init(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in))
        self.has_bias = bias
        if bias:
            self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        y = nx.matmul(x, self.weight)
        return nx.add(y, self.bias) if self.has_bias else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.5):
        super().__init__()
        self.weight = _init(rng, (n, d), std)

    def __call__(self, ids) -> Tensor:
        return nx.take(self.weight, ids, axis=0)


class MLP(Module):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x, activation: bool = True) -> Tensor:
        h = self.fc1(x)
        if activation:
            h = nx.gelu(h)
        return self.fc2(h)


class TransformerBlock(Module):
    """Pre-norm multi-head self-attention + MLP block over (B, T, d) inputs."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator, causal: bool):
        super().__init__()
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng, std=1.0 / math.sqrt(2 * d))
        self.ln2 = LayerNorm(d)
        self.ff = MLP(d, d_ff, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return nx.transpose(nx.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def attention_map(self, x: Tensor, key_mask=None, prefix_len=None) -> np.ndarray:
        """Attention weights (B, H, T, T) this block would use on ``x`` (no tape)."""
        h = self.ln1(x)
        q, k = self._split(self.wq(h)), self._split(self.wk(h))
        return nx.attention_weights(q.data, k.data, self.causal, key_mask, prefix_len)

    def __call__(self, x: Tensor, key_mask=None, prefix_len=None) -> Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self._split(self.wq(h)), self._split(self.wk(h)), self._split(self.wv(h))
        a = nx.attention(q, k, v, causal_mask=self.causal, key_mask=key_mask, prefix_len=prefix_len)
        a = nx.reshape(nx.transpose(a, (0, 2, 1, 3)), (b, t, d))
        x = nx.add(x, self.wo(a))
        return nx.add(x, self.ff(self.ln2(x)))


class Transformer(Module):
    def __init__(self, layers: int, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 causal: bool):
        super().__init__()
        self.n_layers = layers
        self.blocks = []
        for i in range(layers):
            blk = TransformerBlock(d, heads, d_ff, rng, causal)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)
        self.ln_f = LayerNorm(d)

    def __call__(self, x: Tensor, key_mask=None, upto: int | None = None, prefix_len=None) -> Tensor:
        blocks = self.blocks if upto is None else self.blocks[:upto]
        for blk in blocks:
            x = blk(x, key_mask, prefix_len)
        return self.ln_f(x) if upto is None else x


class SGD:
    """Plain or momentum SGD over a fixed parameter list."""

    def __init__(self, params, lr: float, momentum: float = 0.0, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        for p, g, v in zip(self.params, grads, self._vel):
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data = p.data - self.lr * g
            p.grad = None

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam, used only for the supervised warm-up of the frozen components."""

    def __init__(self, params, lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None
