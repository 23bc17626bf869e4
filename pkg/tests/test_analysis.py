from fractions import Fraction

import numpy as np
import pytest

from hadamix import numerics as nx
from hadamix.analysis import (
    attention_reduction_fraction,
    compare_params,
    count_params,
    forward_flops_per_token,
    mixing_flops_per_token,
    reference_sizes,
    projection_flops,
    theoretical_speedup,
    training_flops,
    weight_bytes,
)
from hadamix.model import ModelConfig, TransformerModel

REF_DELTAS = [7_068_672, 25_141_248, 56_586_240, 100_614_144]
REF_DELTAS_M = [7.1, 25.1, 56.6, 100.6]
REF_REL = [-5.7, -7.1, -7.5, -7.7]
REF_TOTALS = [124e6, 354e6, 757e6, 1.3e9]


def test_reference_sizes_deltas_from_first_principles():
    for (L, d), delta in zip([(12, 768), (24, 1024), (24, 1536), (24, 2048)], REF_DELTAS):
        assert L * (d * d - d) == delta


def test_reference_sizes_rows():
    rows = reference_sizes()
    assert [r["delta"] for r in rows] == REF_DELTAS
    assert [round(r["delta"] / 1e6, 1) for r in rows] == REF_DELTAS_M
    for r, rel, total in zip(rows, REF_REL, REF_TOTALS):
        assert abs(-100 * r["relative_delta"] - rel) <= 0.15
        assert abs(r["baseline"] - total) / total < 0.02


def test_breakdown_example():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=10, variant="dense", mlp_hidden=16)
    b = count_params(cfg)
    assert (b.embedding, b.attn_qkv, b.attn_mixing, b.mlp, b.norms, b.final_norm, b.lm_head) == (80, 192, 72, 384, 32, 16, 0)
    assert b.total == 80 + 192 + 72 + 384 + 32 + 16
    assert count_params(cfg, "hadamard").attn_mixing == 16
    assert b.as_dict()["total"] == b.total


def test_delta_is_layers_times_d2_minus_d():
    for L, d in [(1, 2), (2, 8), (4, 128), (3, 768)]:
        cfg = ModelConfig(n_layers=L, d_model=d, n_heads=1, variant="dense")
        assert compare_params(cfg).delta == L * (d * d - d)
    assert compare_params(ModelConfig(n_layers=5, d_model=2, n_heads=1)).delta == 5 * 2


def test_width_one_removes_nothing():
    # a 1x1 Hadamard mix has as many parameters as a 1x1 dense one with bias
    assert attention_reduction_fraction(1) == {"no_bias": 0, "with_bias": 0}


def test_weight_bytes():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2)
    assert weight_bytes(cfg, "dense") - weight_bytes(cfg, "hadamard") == 4 * 2 * (16 * 16 - 16)


@pytest.mark.parametrize("d,dense,fwht", [(64, 4096, 384), (256, 65536, 2048), (1024, 1048576, 10240)])
def test_projection_flops_power_of_two(d, dense, fwht):
    f = projection_flops(d)
    assert f.dense == dense
    assert f.fwht == fwht
    assert f.fwht_executed == fwht


def test_projection_flops_768():
    f = projection_flops(768)
    assert f.dense == 589824
    assert abs(f.fwht - 7373) / 7373 < 0.005
    assert f.fwht_executed == 768 * (6 + 12)
    assert theoretical_speedup(768) == pytest.approx(80, rel=0.01)
    assert f.speedup == theoretical_speedup(768)


def test_op_ratio_1024():
    assert projection_flops(1024).op_ratio == 102.4


def test_reduction_fraction_512_exact():
    r = attention_reduction_fraction(512)
    assert isinstance(r["no_bias"], Fraction)
    assert r["no_bias"] == Fraction(1, 4) - Fraction(1, 2048)
    assert r["with_bias"] == Fraction(512 * 511, 4 * 512 * 512 + 512)


def test_reduction_fraction_monotone_to_quarter():
    for key in ("no_bias", "with_bias"):
        vals = [attention_reduction_fraction(2 ** k)[key] for k in range(0, 20)]
        assert all(a < b for a, b in zip(vals, vals[1:]))
        assert all(v < Fraction(1, 4) for v in vals)
        assert Fraction(1, 4) - vals[-1] < Fraction(1, 2 ** 20)


def test_reduction_fraction_rejects_zero():
    with pytest.raises(ValueError):
        attention_reduction_fraction(0)


def test_mixing_flops():
    cfg = ModelConfig(d_model=64, n_heads=4, variant="dense")
    assert mixing_flops_per_token(cfg) == 2 * 64 * 64 + 64
    assert mixing_flops_per_token(cfg, "hadamard") == 64 * 6 + 2 * 64


def test_training_flops_linear():
    cfg = ModelConfig(d_model=32, n_heads=2)
    assert training_flops(cfg, 16, 0) == 0
    assert training_flops(cfg, 16, 300) == 3 * training_flops(cfg, 16, 100)
    assert training_flops(cfg, 16, 100, "hadamard") < training_flops(cfg, 16, 100, "dense")


@pytest.mark.parametrize("variant", ["dense", "hadamard"])
@pytest.mark.parametrize("d", [32, 48])
def test_instrumented_forward_flops(variant, d):
    cfg = ModelConfig(n_layers=2, d_model=d, n_heads=2, vocab_size=64, variant=variant, context_length=16)
    m = TransformerModel(cfg)
    tokens = np.zeros((3, 16), int)
    with nx.count_ops() as c:
        m.forward(tokens)
    measured = c.flops()
    predicted = forward_flops_per_token(cfg, 16) * 3 * 16
    assert abs(measured - predicted) / predicted < 0.05
