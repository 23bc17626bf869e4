"""Decoder-only transformer: pre-norm blocks, SwiGLU MLPs, tied LM head.

Training uses explicit forward/backward passes. :meth:`TransformerModel.loss_and_grad`
runs both and accumulates gradients into every :class:`ParamTensor`.
Inference uses :meth:`TransformerModel.forward` with an optional
:class:`~hadamix.attention.KVCache`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .attention import (
    INIT_STD,
    AttentionVariant,
    AttentionWeights,
    KVCache,
    attention_backward,
    attention_forward,
    param_rng,
)
from .numerics import ParamTensor
from .wht import SUPPORTED_FAMILIES, supported_order

NORM_KINDS = ("layernorm", "rmsnorm")


def default_mlp_hidden(d_model):
    return math.ceil(8 * d_model / 3 / 64) * 64


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    variant: AttentionVariant = AttentionVariant.HADAMARD
    mlp_hidden: int | None = None
    norm_kind: str = "layernorm"
    context_length: int = 128
    tie_embeddings: bool = True

    def __post_init__(self):
        self.variant = AttentionVariant.parse(self.variant)
        if self.mlp_hidden is None:
            self.mlp_hidden = default_mlp_hidden(self.d_model)
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "mlp_hidden", "context_length"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError(f"head_dim={self.d_model // self.n_heads} must be even for RoPE")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.variant is AttentionVariant.HADAMARD and not supported_order(self.d_model):
            raise ValueError(f"d_model={self.d_model} has no Hadamard matrix here; {SUPPORTED_FAMILIES}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def with_variant(self, variant):
        return ModelConfig(**{**self.to_dict(), "variant": variant})

    def to_dict(self):
        out = asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass(eq=False)
class Block:
    norm1_gain: ParamTensor
    norm1_bias: ParamTensor | None
    attn: AttentionWeights
    norm2_gain: ParamTensor
    norm2_bias: ParamTensor | None
    w_gate: ParamTensor
    w_up: ParamTensor
    w_down: ParamTensor

    def params(self):
        out = [self.norm1_gain, self.norm1_bias, *self.attn.params(),
               self.norm2_gain, self.norm2_bias, self.w_gate, self.w_up, self.w_down]
        return [p for p in out if p is not None]


def _normal(seed, name, shape, dtype):
    rng = param_rng(seed, name)
    return ParamTensor(name, (rng.standard_normal(shape) * INIT_STD).astype(dtype))


def _norm_params(cfg, prefix, dtype):
    gain = ParamTensor(f"{prefix}.gain", np.ones(cfg.d_model, dtype), decay=False)
    bias = None
    if cfg.norm_kind == "layernorm":
        bias = ParamTensor(f"{prefix}.bias", np.zeros(cfg.d_model, dtype), decay=False)
    return gain, bias


class TransformerModel:
    def __init__(self, cfg, seed=0, dtype=nx.DTYPE):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        d, h = cfg.d_model, cfg.mlp_hidden
        self.token_embedding = _normal(seed, "token_embedding", (cfg.vocab_size, d), dtype)
        self.blocks = []
        for i in range(cfg.n_layers):
            p = f"blocks.{i}"
            g1, b1 = _norm_params(cfg, f"{p}.norm1", dtype)
            g2, b2 = _norm_params(cfg, f"{p}.norm2", dtype)
            self.blocks.append(Block(
                norm1_gain=g1, norm1_bias=b1,
                attn=AttentionWeights.init(d, cfg.variant, seed=seed, prefix=f"{p}.attn", dtype=dtype),
                norm2_gain=g2, norm2_bias=b2,
                w_gate=_normal(seed, f"{p}.mlp.w_gate", (d, h), dtype),
                w_up=_normal(seed, f"{p}.mlp.w_up", (d, h), dtype),
                w_down=_normal(seed, f"{p}.mlp.w_down", (h, d), dtype),
            ))
        self.final_gain, self.final_bias = _norm_params(cfg, "final_norm", dtype)
        self.lm_head = None
        if not cfg.tie_embeddings:
            self.lm_head = _normal(seed, "lm_head", (cfg.vocab_size, d), dtype)

    # -- parameter census -------------------------------------------------

    def params(self):
        out = [self.token_embedding]
        for b in self.blocks:
            out.extend(b.params())
        out.extend(p for p in (self.final_gain, self.final_bias, self.lm_head) if p is not None)
        return out

    def named_params(self):
        return {p.name: p for p in self.params()}

    def num_params(self):
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    @property
    def head_weight(self):
        return self.token_embedding if self.lm_head is None else self.lm_head

    # -- forward ----------------------------------------------------------

    def _check_tokens(self, tokens, cached):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ValueError(f"tokens must be (T,) or (B, T) with T >= 1, got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError("tokens must be integers")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        if cached + tokens.shape[1] > self.cfg.context_length:
            raise ValueError(f"context overflow: {cached} cached + {tokens.shape[1]} new > {self.cfg.context_length}")
        return tokens

    def _forward(self, tokens, cache, keep):
        cfg = self.cfg
        x = self.token_embedding.value[tokens]
        ctxs = []
        for i, b in enumerate(self.blocks):
            h1, n1 = nx.norm_forward(cfg.norm_kind, x, b.norm1_gain.value, b.norm1_bias and b.norm1_bias.value)
            a, actx = attention_forward(h1, b.attn, cfg.n_heads, cache[i] if cache is not None else None)
            x = x + a
            h2, n2 = nx.norm_forward(cfg.norm_kind, x, b.norm2_gain.value, b.norm2_bias and b.norm2_bias.value)
            B, T, d = h2.shape
            h2f = h2.reshape(B * T, d)
            ga = nx.matmul(h2f, b.w_gate.value)
            up = nx.matmul(h2f, b.w_up.value)
            s = nx.silu(ga)
            mid = s * up
            x = x + nx.matmul(mid, b.w_down.value).reshape(B, T, d)
            if keep:
                ctxs.append((n1, actx, n2, h2f, ga, up, s, mid))
        hf, nf = nx.norm_forward(cfg.norm_kind, x, self.final_gain.value, self.final_bias and self.final_bias.value)
        B, T, d = hf.shape
        hff = hf.reshape(B * T, d)
        logits = nx.matmul(hff, self.head_weight.value.T).reshape(B, T, cfg.vocab_size)
        return logits, (tokens, ctxs, nf, hff)

    def forward(self, tokens, cache=None):
        """Logits ``(B, T, vocab)`` (``(T, vocab)`` for 1-D ``tokens``)."""
        squeeze = np.asarray(tokens).ndim == 1
        cached = cache.length if cache is not None else 0
        tokens = self._check_tokens(tokens, cached)
        logits, _ = self._forward(tokens, cache, keep=False)
        return logits[0] if squeeze else logits

    __call__ = forward

    # -- backward ---------------------------------------------------------

    def _backward(self, dlogits, saved):
        cfg = self.cfg
        tokens, ctxs, nf, hff = saved
        B, T, V = dlogits.shape
        d = cfg.d_model
        dh, dW = nx.matmul_backward(hff, self.head_weight.value.T, dlogits.reshape(B * T, V))
        self.head_weight.grad += dW.T
        dx, dg, db = nx.norm_backward(cfg.norm_kind, nf, dh.reshape(B, T, d))
        self.final_gain.grad += dg
        if db is not None:
            self.final_bias.grad += db
        for b, (n1, actx, n2, h2f, ga, up, s, mid) in zip(reversed(self.blocks), reversed(ctxs)):
            dmid, dWd = nx.matmul_backward(mid, b.w_down.value, dx.reshape(B * T, d))
            b.w_down.grad += dWd
            ds, dup = nx.mul_backward(s, up, dmid)
            dga = nx.silu_backward(ga, ds)
            dh2a, dWg = nx.matmul_backward(h2f, b.w_gate.value, dga)
            dh2b, dWu = nx.matmul_backward(h2f, b.w_up.value, dup)
            b.w_gate.grad += dWg
            b.w_up.grad += dWu
            dxn, dg, db = nx.norm_backward(cfg.norm_kind, n2, (dh2a + dh2b).reshape(B, T, d))
            b.norm2_gain.grad += dg
            if db is not None:
                b.norm2_bias.grad += db
            dx = dx + dxn
            dh1 = attention_backward(dx, b.attn, cfg.n_heads, actx)
            dxn, dg, db = nx.norm_backward(cfg.norm_kind, n1, dh1)
            b.norm1_gain.grad += dg
            if db is not None:
                b.norm1_bias.grad += db
            dx = dx + dxn
        np.add.at(self.token_embedding.grad, tokens.reshape(-1), dx.reshape(B * T, d))

    def loss_and_grad(self, tokens, targets):
        """Mean cross-entropy over all positions; gradients are accumulated."""
        tokens = self._check_tokens(tokens, 0)
        targets = np.asarray(targets).reshape(tokens.shape)
        logits, saved = self._forward(tokens, None, keep=True)
        loss, dlogits = cross_entropy_loss(logits.reshape(-1, self.cfg.vocab_size), targets.reshape(-1))
        self._backward(dlogits.reshape(logits.shape), saved)
        return loss

    def loss(self, tokens, targets):
        tokens = self._check_tokens(tokens, 0)
        logits, _ = self._forward(tokens, None, keep=False)
        return cross_entropy_loss(logits.reshape(-1, self.cfg.vocab_size), np.asarray(targets).reshape(-1))[0]

    # -- generation -------------------------------------------------------

    def new_cache(self, batch=1, capacity=None):
        return KVCache(self.cfg.n_layers, batch, capacity or self.cfg.context_length, self.cfg.d_model, self.dtype)

    def generate(self, prompt, n_new, temperature=None, seed=0, use_cache=True):
        """Extend ``prompt`` by ``n_new`` tokens.

        ``temperature=None`` (or 0) is greedy argmax. ``use_cache=False``
        recomputes the full context each step; it exists as a reference for
        the cached path.
        """
        prompt = np.asarray(prompt, dtype=np.int64)
        squeeze = prompt.ndim == 1
        prompt = np.atleast_2d(prompt)
        if prompt.shape[1] == 0:
            raise ValueError("prompt must be non-empty")
        if prompt.shape[1] + n_new > self.cfg.context_length:
            raise ValueError(f"context overflow: prompt {prompt.shape[1]} + {n_new} new > {self.cfg.context_length}")
        rng = np.random.default_rng(seed)
        seq = prompt.copy()
        if n_new == 0:
            return seq[0] if squeeze else seq
        cache = self.new_cache(prompt.shape[0]) if use_cache else None
        logits = self.forward(seq, cache)[:, -1]
        for i in range(n_new):
            nxt = _sample(logits, temperature, rng)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            if i == n_new - 1:
                break
            if use_cache:
                logits = self.forward(nxt[:, None], cache)[:, -1]
            else:
                logits = self.forward(seq)[:, -1]
        return seq[0] if squeeze else seq


def _sample(logits, temperature, rng):
    if not temperature:
        return np.argmax(logits, axis=-1).astype(np.int64)
    p = nx.softmax_rows(logits.astype(np.float64) / temperature)
    return np.array([rng.choice(p.shape[-1], p=row) for row in p], dtype=np.int64)


def cross_entropy_loss(logits, targets):
    """Mean NLL over rows and its gradient ``(softmax - onehot) / n``."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    n, V = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError(f"target id out of range [0, {V})")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, targets], dtype=np.float64))
    grad = np.exp(logp)
    grad[rows, targets] -= 1
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"HMIX"
FORMAT_VERSION = 1


def write_checkpoint(path, meta, tensors):
    """Write ``meta`` (JSON-able dict) and named float32 tensors."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        text = json.dumps(meta, sort_keys=True).encode()
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return meta, tensors


def save_model(path, model, extra_meta=None, extra_tensors=None):
    meta = {"model": model.cfg.to_dict(), "seed": model.seed, **(extra_meta or {})}
    tensors = {p.name: p.value for p in model.params()}
    tensors.update(extra_tensors or {})
    write_checkpoint(path, meta, tensors)


def load_model(path):
    """Return ``(model, meta, tensors)``; ``tensors`` holds non-model entries."""
    meta, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    model = TransformerModel(cfg, seed=meta.get("seed", 0))
    for p in model.params():
        if p.name not in tensors:
            raise ValueError(f"{path}: missing tensor {p.name}")
        arr = tensors.pop(p.name)
        if arr.shape != p.shape:
            raise ValueError(f"{path}: {p.name} has shape {arr.shape}, expected {p.shape}")
        p.value[...] = arr
    return model, meta, tensors
