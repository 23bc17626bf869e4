"""Causal multi-head attention with RoPE and two head-mixing variants.

``DENSE`` mixes the concatenated head outputs with a learned ``d x d``
projection plus bias. ``HADAMARD`` computes ``alpha * (Y @ H) + beta``, where
``H`` is the normalized Walsh-Hadamard matrix applied with the fast
transform, and only ``alpha`` and ``beta`` are trained.

Activations are shaped ``(B, T, d)``; a 2-D ``(T, d)`` input is treated as a
batch of one.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nx
from .numerics import ParamTensor
from .wht import HadamardSpec, fwht_batch

ROPE_BASE = 10000.0
INIT_STD = 0.02


class AttentionVariant(str, Enum):
    DENSE = "dense"
    HADAMARD = "hadamard"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown attention variant {value!r}; expected 'dense' or 'hadamard'") from None


def param_rng(seed, name):
    """Per-parameter generator so both variants share every common init."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(eq=False)
class AttentionWeights:
    w_q: ParamTensor
    w_k: ParamTensor
    w_v: ParamTensor
    variant: AttentionVariant
    w_o: ParamTensor | None = None
    b_o: ParamTensor | None = None
    alpha: ParamTensor | None = None
    beta: ParamTensor | None = None
    spec: HadamardSpec | None = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        for p in (self.w_q, self.w_k, self.w_v):
            if p.shape != (d, d):
                raise ValueError(f"{p.name} must be {d}x{d}, got {p.shape}")
        if self.variant is AttentionVariant.DENSE:
            if self.w_o is None or self.b_o is None or self.alpha is not None or self.beta is not None:
                raise ValueError("dense attention needs w_o and b_o and no alpha/beta")
        else:
            if self.alpha is None or self.beta is None or self.w_o is not None or self.b_o is not None:
                raise ValueError("hadamard attention needs alpha and beta and no w_o/b_o")
            if self.spec is None:
                self.spec = HadamardSpec.for_order(d, normalized=True)
            if self.spec.order != d or not self.spec.normalized:
                raise ValueError(f"hadamard mix needs a normalized spec of order {d}")

    @property
    def d(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d, variant, seed=0, prefix="attn", dtype=nx.DTYPE):
        variant = AttentionVariant.parse(variant)

        def normal(name):
            rng = param_rng(seed, f"{prefix}.{name}")
            return ParamTensor(f"{prefix}.{name}", (rng.standard_normal((d, d)) * INIT_STD).astype(dtype))

        kw = dict(w_q=normal("w_q"), w_k=normal("w_k"), w_v=normal("w_v"), variant=variant)
        if variant is AttentionVariant.DENSE:
            kw["w_o"] = normal("w_o")
            kw["b_o"] = ParamTensor(f"{prefix}.b_o", np.zeros(d, dtype), decay=False)
        else:
            kw["alpha"] = ParamTensor(f"{prefix}.alpha", np.ones(d, dtype), decay=False)
            kw["beta"] = ParamTensor(f"{prefix}.beta", np.zeros(d, dtype), decay=False)
        return cls(**kw)

    def params(self):
        mix = [self.w_o, self.b_o] if self.variant is AttentionVariant.DENSE else [self.alpha, self.beta]
        return [self.w_q, self.w_k, self.w_v, *mix]


class LayerKV:
    """Append-only key/value store for one layer, preallocated to capacity."""

    def __init__(self, batch, capacity, d, dtype=nx.DTYPE):
        self.capacity = capacity
        self.keys = np.zeros((batch, capacity, d), dtype)
        self.values = np.zeros((batch, capacity, d), dtype)
        self.length = 0

    def append(self, k, v):
        t = k.shape[1]
        if self.length + t > self.capacity:
            raise ValueError(f"KV cache overflow: {self.length} cached + {t} new > capacity {self.capacity}")
        if k.shape[0] != self.keys.shape[0]:
            raise ValueError(f"KV cache batch is {self.keys.shape[0]}, got {k.shape[0]}")
        self.keys[:, self.length:self.length + t] = k
        self.values[:, self.length:self.length + t] = v
        self.length += t

    @property
    def nbytes(self):
        return self.keys.nbytes + self.values.nbytes


class KVCache:
    def __init__(self, n_layers, batch, capacity, d, dtype=nx.DTYPE):
        self.layers = [LayerKV(batch, capacity, d, dtype) for _ in range(n_layers)]
        self.capacity = capacity

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    @property
    def length(self):
        return self.layers[0].length if self.layers else 0

    @property
    def nbytes(self):
        return sum(layer.nbytes for layer in self.layers)


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------

def _rope_tables(T, head_dim, start_pos, dtype):
    half = head_dim // 2
    theta = ROPE_BASE ** (-2.0 * np.arange(half) / head_dim)
    pos = start_pos + np.arange(T)
    ang = np.outer(pos, theta)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x, start_pos, n_heads, inverse=False):
    """Rotate feature pairs ``(2i, 2i+1)`` of every head by ``pos * theta_i``.

    ``x`` is ``(..., T, d)``; position of row ``t`` is ``start_pos + t``.
    ``inverse`` rotates by the negative angle, which is also the backward pass.
    """
    *lead, T, d = x.shape
    if d % n_heads:
        raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
    head_dim = d // n_heads
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head_dim, got {head_dim}")
    cos, sin = _rope_tables(T, head_dim, start_pos, x.dtype)
    if inverse:
        sin = -sin
    xr = x.reshape(*lead, T, n_heads, head_dim // 2, 2)
    x0, x1 = xr[..., 0], xr[..., 1]
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    out = np.empty_like(xr)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# head mixing
# ---------------------------------------------------------------------------

def hadamard_mix_forward(Y, alpha, beta, spec):
    """``alpha * (Y @ H) + beta`` with ``H`` applied by the fast transform.

    ``Y @ H`` applies ``H.T`` to each row, i.e. the adjoint transform; it only
    differs from the forward one for composite (Paley) orders. Returns
    ``(out, YH)``; ``YH`` is needed by the backward pass.
    """
    d = spec.order
    if Y.shape[-1] != d or alpha.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"hadamard mix shapes disagree with order {d}: Y{Y.shape}, alpha{alpha.shape}, beta{beta.shape}")
    YH = fwht_batch(Y, spec, adjoint=True)
    nx.record("affine", 2 * Y.size)
    return YH * alpha + beta, YH


def hadamard_mix_backward(YH, alpha, spec, G):
    """Gradients of ``alpha * (Y @ H) + beta`` given ``YH = Y @ H``.

    Returns ``(dY, dalpha, dbeta)``; ``dY = (G * alpha) @ H.T``.
    """
    if G.shape != YH.shape:
        raise ValueError(f"upstream shape {G.shape} != mix output {YH.shape}")
    lead = tuple(range(G.ndim - 1))
    dbeta = G.sum(axis=lead)
    dalpha = (G * YH).sum(axis=lead)
    dY = fwht_batch(G * alpha, spec, adjoint=False)
    return dY, dalpha, dbeta


def dense_mix_forward(Y, w_o, b_o):
    shape = Y.shape
    out = nx.matmul(Y.reshape(-1, shape[-1]), w_o, tag="mix_mac") + b_o
    nx.record("affine", out.size)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionContext:
    X: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    P: np.ndarray
    Y: np.ndarray
    YH: np.ndarray | None
    start_pos: int


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3).reshape(B * n_heads, T, d // n_heads)


def _merge_heads(x, B, n_heads):
    BH, T, hd = x.shape
    return x.reshape(B, n_heads, T, hd).transpose(0, 2, 1, 3).reshape(B, T, n_heads * hd)


def attention_forward(X, weights, n_heads, cache=None):
    """Causal attention over ``X`` (``(B, T, d)`` or ``(T, d)``).

    With a :class:`LayerKV` ``cache`` the new keys/values are appended and
    the queries attend over every cached position plus the new ones.
    Returns ``(out, ctx)``; ``ctx`` feeds :func:`attention_backward` and is
    only meaningful without a cache.
    """
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    B, T, d = X.shape
    if d != weights.d:
        raise ValueError(f"input width {d} != attention width {weights.d}")
    if d % n_heads or (d // n_heads) % 2:
        raise ValueError(f"d={d}, n_heads={n_heads}: head_dim must be an integer and even")
    hd = d // n_heads
    start = 0
    if cache is not None:
        start = cache.length
        if start + T > cache.capacity:
            raise ValueError(f"KV cache overflow: {start} cached + {T} new > capacity {cache.capacity}")

    X2 = X.reshape(B * T, d)
    q = nx.matmul(X2, weights.w_q.value).reshape(B, T, d)
    k = nx.matmul(X2, weights.w_k.value).reshape(B, T, d)
    v = nx.matmul(X2, weights.w_v.value).reshape(B, T, d)
    q = rope_apply(q, start, n_heads)
    k = rope_apply(k, start, n_heads)

    if cache is not None:
        cache.append(k, v)
        K = cache.keys[:, :start + T]
        V = cache.values[:, :start + T]
    else:
        K, V = k, v
    S = start + T

    qh = _split_heads(q, n_heads)
    kh = _split_heads(K, n_heads)
    vh = _split_heads(V, n_heads)
    scores = nx.bmm(qh, kh.transpose(0, 2, 1)) * X.dtype.type(1.0 / np.sqrt(hd))
    future = np.arange(S)[None, :] > (start + np.arange(T))[:, None]
    scores[:, future] = -np.inf
    P = nx.softmax_rows(scores)
    Y = _merge_heads(nx.bmm(P, vh), B, n_heads)

    if weights.variant is AttentionVariant.DENSE:
        out = dense_mix_forward(Y, weights.w_o.value, weights.b_o.value)
        YH = None
    else:
        out, YH = hadamard_mix_forward(Y, weights.alpha.value, weights.beta.value, weights.spec)

    ctx = AttentionContext(X=X, q=q, k=k, v=v, P=P, Y=Y, YH=YH, start_pos=start)
    return (out[0] if squeeze else out), ctx


def attention_backward(G, weights, n_heads, ctx):
    """Accumulate parameter gradients into ``weights`` and return ``dX``."""
    squeeze = G.ndim == 2
    if squeeze:
        G = G[None]
    X = ctx.X
    B, T, d = X.shape
    if G.shape != X.shape:
        raise ValueError(f"upstream shape {G.shape} != attention output {X.shape}")
    if ctx.start_pos:
        raise ValueError("attention_backward does not support cached contexts")
    hd = d // n_heads

    if weights.variant is AttentionVariant.DENSE:
        G2 = G.reshape(B * T, d)
        dY2, dW = nx.matmul_backward(ctx.Y.reshape(B * T, d), weights.w_o.value, G2, tag="mix_mac")
        weights.w_o.grad += dW
        weights.b_o.grad += G2.sum(axis=0)
        dY = dY2.reshape(B, T, d)
    else:
        dY, dalpha, dbeta = hadamard_mix_backward(ctx.YH, weights.alpha.value, weights.spec, G)
        weights.alpha.grad += dalpha
        weights.beta.grad += dbeta

    dO = _split_heads(dY, n_heads)
    qh = _split_heads(ctx.q, n_heads)
    kh = _split_heads(ctx.k, n_heads)
    vh = _split_heads(ctx.v, n_heads)
    dP, dvh = nx.bmm_backward(ctx.P, vh, dO)
    dscores = nx.softmax_rows_backward(ctx.P, dP) * X.dtype.type(1.0 / np.sqrt(hd))
    dqh, dkhT = nx.bmm_backward(qh, kh.transpose(0, 2, 1), dscores)
    dq = rope_apply(_merge_heads(dqh, B, n_heads), 0, n_heads, inverse=True)
    dk = rope_apply(_merge_heads(dkhT.transpose(0, 2, 1), B, n_heads), 0, n_heads, inverse=True)
    dv = _merge_heads(dvh, B, n_heads)

    X2 = X.reshape(B * T, d)
    dX = np.zeros_like(X2)
    for w, dproj in ((weights.w_q, dq), (weights.w_k, dk), (weights.w_v, dv)):
        dx, dw = nx.matmul_backward(X2, w.value, dproj.reshape(B * T, d))
        w.grad += dw
        dX += dx
    dX = dX.reshape(B, T, d)
    return dX[0] if squeeze else dX
