"""Differentiable primitives over :class:`Tensor`.

Broadcasting is limited to leading-batch dimensions: the smaller operand's
shape must be a suffix of the larger one's (or a scalar).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
MASK_FILL = -1e30


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _suffix_shape(a: tuple, b: tuple, op: str) -> None:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if small and big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading-batch dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul")
    b = as_tensor(b)
    _suffix_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise FloatingPointError("log of a non-positive value")
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    # inner = √(2/π)·x·(1 + 0.044715·x²), built in place
    t = np.multiply(x2, 0.044715)
    t += 1.0
    t *= xd
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    half = np.add(t, 1.0)
    half *= 0.5  # 0.5·(1 + tanh)
    out = half * xd

    def bw(g):
        # d/dx = 0.5(1 + t) + 0.5·x·(1 - t²)·√(2/π)(1 + 3·0.044715·x²)
        d = np.multiply(x2, 3 * 0.044715)
        d += 1.0
        d *= _SQRT_2_OVER_PI * 0.5
        d *= xd
        sech2 = np.multiply(t, t)
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += half
        d *= g
        return (d,)

    return make_result(out, (x,), bw, "gelu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), stable for large |x|."""
    x = as_tensor(x)
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    s = _sigmoid_np(-xd)
    return make_result(out, (x,), lambda g: (g * s,), "log_sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return make_result(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inv),),
        "transpose",
    )


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw, "concat")


def take(x, idx, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` with an integer index array."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            gm = np.moveaxis(gx, axis, 0)
            gg = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
            np.add.at(gm, idx, gg)
        return (gx,)

    return make_result(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def pick(x, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]`` along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {x.shape[:-1]}")
    shape = x.shape
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return make_result(out, (x,), bw, "pick")


# ---------------------------------------------------------------------------
# normalisation and attention
# ---------------------------------------------------------------------------


def _check_axis(x: Tensor, axis: int, op: str) -> None:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"{op}: empty axis {axis} for shape {x.shape}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    _check_axis(x, -1, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def attention_weights(q: np.ndarray, k: np.ndarray, causal: bool, key_mask=None,
                      prefix_len=None) -> np.ndarray:
    """softmax(q kᵀ/√d + mask) as a plain array."""
    d = q.shape[-1]
    s = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(d)
    allowed = None
    tq, tk = s.shape[-2], s.shape[-1]
    if causal:
        allowed = np.tril(np.ones((tq, tk), dtype=bool), k=tk - tq)
        if prefix_len is not None:
            # queries and keys inside the prefix see each other
            pl = np.asarray(prefix_len, dtype=np.int64).reshape(-1)
            qi = np.arange(tq) + (tk - tq)
            lim = pl[:, None, None]
            both = (qi[None, :, None] < lim) & (np.arange(tk)[None, None, :] < lim)
            both = both.reshape(both.shape[:1] + (1,) * (s.ndim - 3) + both.shape[1:])
            allowed = allowed | both
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        # key_mask: (batch, tk) broadcast over heads and queries
        km = km.reshape(km.shape[:1] + (1,) * (s.ndim - 2) + km.shape[-1:])
        allowed = km if allowed is None else (allowed & km)
    if allowed is not None:
        s = np.where(allowed, s, MASK_FILL)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    if allowed is not None:
        e = np.where(allowed, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q, k, v, causal_mask: bool = False, key_mask=None, prefix_len=None) -> Tensor:
    """Scaled dot-product attention softmax(q·kᵀ/√d + mask)·v.

    q: (..., Tq, d), k: (..., Tk, d), v: (..., Tk, dv). With ``causal_mask``
    query i sees keys j <= i (aligned to the end when Tq < Tk). ``key_mask``
    (batch, Tk) marks valid keys. ``prefix_len`` (scalar or per batch row)
    lifts the causal restriction among the first ``prefix_len`` positions.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    p = attention_weights(qd, kd, causal_mask, key_mask, prefix_len)
    scale = 1.0 / math.sqrt(qd.shape[-1])

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ kd) * scale
        gk = (np.swapaxes(gs, -1, -2) @ qd) * scale
        return gq, gk, gv

    return make_result(p @ vd, (q, k, v), bw, "attention")
