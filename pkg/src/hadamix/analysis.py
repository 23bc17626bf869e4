"""Parameter and FLOP accounting for dense vs Hadamard head mixing.

Conventions:

* Dense output projection carries a bias: ``d**2 + d`` mixing parameters.
  The Hadamard mix has ``alpha`` and ``beta``: ``2 * d``. Per block the
  difference is ``d**2 - d``.
* Projection FLOPs follow the usual bar-chart convention: ``d**2`` per token
  for dense (multiply-accumulates) and ``d * log2(d)`` add/subs for the
  transform. For composite widths the kernel actually executes
  ``d * (log2(d / 12) + 12)``; both numbers are reported.
* Training FLOPs count a MAC as two flops and use backward = 2 x forward.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

from .attention import AttentionVariant
from .model import ModelConfig
from .wht import HadamardSpec

# (name, n_layers, d_model, n_heads) for the four GPT-style reference sizes
REFERENCE_SIZES = (
    ("Tiny", 12, 768, 12),
    ("Small", 24, 1024, 16),
    ("Base", 24, 1536, 16),
    ("Large", 24, 2048, 16),
)
GPT2_VOCAB = 50257


@dataclass
class ParamBreakdown:
    variant: str
    embedding: int
    attn_qkv: int
    attn_mixing: int
    mlp: int
    norms: int
    final_norm: int
    lm_head: int
    n_layers: int

    @property
    def attention_per_block(self):
        return self.attn_qkv + self.attn_mixing

    @property
    def per_block(self):
        return self.attention_per_block + self.mlp + self.norms

    @property
    def total(self):
        return self.embedding + self.n_layers * self.per_block + self.final_norm + self.lm_head

    def as_dict(self):
        out = asdict(self)
        out.update(attention_per_block=self.attention_per_block, per_block=self.per_block, total=self.total)
        return out


def _norm_size(cfg):
    return 2 * cfg.d_model if cfg.norm_kind == "layernorm" else cfg.d_model


def count_params(cfg, variant=None):
    """Exact trainable-parameter census for ``cfg`` (optionally overriding its variant)."""
    variant = AttentionVariant.parse(variant or cfg.variant)
    d = cfg.d_model
    mixing = d * d + d if variant is AttentionVariant.DENSE else 2 * d
    return ParamBreakdown(
        variant=variant.value,
        embedding=cfg.vocab_size * d,
        attn_qkv=3 * d * d,
        attn_mixing=mixing,
        mlp=3 * d * cfg.mlp_hidden,
        norms=2 * _norm_size(cfg),
        final_norm=_norm_size(cfg),
        lm_head=0 if cfg.tie_embeddings else cfg.vocab_size * d,
        n_layers=cfg.n_layers,
    )


@dataclass
class VariantComparison:
    baseline: ParamBreakdown
    hadamard: ParamBreakdown

    @property
    def delta(self):
        return self.baseline.total - self.hadamard.total

    @property
    def relative_delta(self):
        return self.delta / self.baseline.total


def compare_params(cfg):
    return VariantComparison(count_params(cfg, "dense"), count_params(cfg, "hadamard"))


def reference_config(n_layers, d_model, n_heads, vocab_size=GPT2_VOCAB, context_length=1024):
    # validation of the Hadamard order is skipped so any width can be analysed
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, vocab_size=vocab_size,
                       variant="dense", context_length=context_length)


def reference_sizes(vocab_size=GPT2_VOCAB):
    rows = []
    for name, L, d, h in REFERENCE_SIZES:
        cmp = compare_params(reference_config(L, d, h, vocab_size))
        rows.append(dict(size=name, n_layers=L, d_model=d, n_heads=h,
                         baseline=cmp.baseline.total, hadamard=cmp.hadamard.total,
                         delta=cmp.delta, relative_delta=cmp.relative_delta))
    return rows


def attention_reduction_fraction(d):
    """Fraction of attention parameters removed, under two bias conventions.

    ``no_bias``: baseline ``4d^2`` and Hadamard block ``3d^2 + d``, giving
    ``(d^2 - d) / (4 d^2) = 1/4 - 1/(4d)``.
    ``with_bias``: dense projection with bias, Hadamard with alpha and beta:
    ``(d^2 - d) / (4 d^2 + d)``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    d = Fraction(d)
    return {"no_bias": (d * d - d) / (4 * d * d), "with_bias": (d * d - d) / (4 * d * d + d)}


@dataclass
class FlopsBreakdown:
    d: int
    dense: int
    fwht: float
    fwht_executed: int

    @property
    def speedup(self):
        return theoretical_speedup(self.d)

    @property
    def op_ratio(self):
        return self.dense / self.fwht_executed if self.fwht_executed else float(self.dense)


def projection_flops(d):
    """Per-token head-mixing work: dense MACs vs transform add/subs."""
    spec = HadamardSpec.for_order(d)
    fwht = d * spec.m if spec.factor == 1 else d * math.log2(d)
    return FlopsBreakdown(d=d, dense=d * d, fwht=fwht, fwht_executed=spec.addsub_count())


def theoretical_speedup(d):
    HadamardSpec.for_order(d)
    return d / math.log2(d) if d > 1 else 1.0


def mixing_flops_per_token(cfg, variant=None):
    """Forward flops of the output-mixing stage for one token."""
    variant = AttentionVariant.parse(variant or cfg.variant)
    d = cfg.d_model
    if variant is AttentionVariant.DENSE:
        return 2 * d * d + d
    return HadamardSpec.for_order(d).addsub_count() + 2 * d


def forward_flops_per_token(cfg, T, variant=None):
    """Forward flops per token for a full causal pass over ``T`` positions.

    Counts the dense products (2 per MAC), the attention score and value
    products over all ``T`` key positions, and the mixing stage. Elementwise
    work (norms, softmax, RoPE, SwiGLU gating) is not counted.
    """
    d, h = cfg.d_model, cfg.mlp_hidden
    per_layer = 2 * 3 * d * d + 2 * 2 * T * d + mixing_flops_per_token(cfg, variant) + 2 * 3 * d * h
    return cfg.n_layers * per_layer + 2 * d * cfg.vocab_size


def training_flops(cfg, T, tokens, variant=None):
    """Training flops for ``tokens`` processed at sequence length ``T`` (forward + 2x backward)."""
    return 3 * tokens * forward_flops_per_token(cfg, T, variant)


def weight_bytes(cfg, variant=None, bytes_per_param=4):
    return bytes_per_param * count_params(cfg, variant).total
