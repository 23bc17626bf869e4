import math

import numpy as np
import pytest

from hadamix import numerics as nx
from hadamix.attention import (
    AttentionVariant,
    AttentionWeights,
    LayerKV,
    attention_forward,
    dense_mix_forward,
    hadamard_mix_backward,
    hadamard_mix_forward,
    rope_apply,
)
from hadamix.checks import attention_gradcheck, rel_error
from hadamix.wht import HadamardSpec, build_hadamard_matrix


def rope_oracle(x, pos, n_heads):
    d = len(x)
    hd = d // n_heads
    out = np.array(x, dtype=float)
    for h in range(n_heads):
        for i in range(hd // 2):
            ang = pos * 10000.0 ** (-2 * i / hd)
            a, b = x[h * hd + 2 * i], x[h * hd + 2 * i + 1]
            out[h * hd + 2 * i] = a * math.cos(ang) - b * math.sin(ang)
            out[h * hd + 2 * i + 1] = a * math.sin(ang) + b * math.cos(ang)
    return out


def attention_oracle(X, w, n_heads):
    """Straight-line causal attention for one sequence, float64, per head."""
    T, d = X.shape
    hd = d // n_heads
    q = X @ w.w_q.value.astype(float)
    k = X @ w.w_k.value.astype(float)
    v = X @ w.w_v.value.astype(float)
    q = np.array([rope_oracle(q[t], t, n_heads) for t in range(T)])
    k = np.array([rope_oracle(k[t], t, n_heads) for t in range(T)])
    Y = np.zeros((T, d))
    for h in range(n_heads):
        s = slice(h * hd, (h + 1) * hd)
        for t in range(T):
            scores = [q[t, s] @ k[u, s] / math.sqrt(hd) for u in range(t + 1)]
            m = max(scores)
            e = [math.exp(x - m) for x in scores]
            tot = sum(e)
            Y[t, s] = sum(e[u] / tot * v[u, s] for u in range(t + 1))
    if w.variant is AttentionVariant.DENSE:
        return Y @ w.w_o.value.astype(float) + w.b_o.value
    H = build_hadamard_matrix(w.spec)
    return w.alpha.value * (Y @ H) + w.beta.value


def test_rope_position_zero_is_identity(rng):
    x = rng.standard_normal((1, 8)).astype(np.float32)
    np.testing.assert_array_equal(rope_apply(x, 0, 2), x)


def test_rope_example():
    x = np.array([[1.0, 0.0, 1.0, 0.0]])
    out = rope_apply(x, 1, 1)
    np.testing.assert_allclose(out, [[math.cos(1), math.sin(1), math.cos(0.01), math.sin(0.01)]], rtol=1e-12)


def test_rope_matches_oracle_and_inverts(rng):
    x = rng.standard_normal((5, 16))
    out = rope_apply(x, 3, 4)
    for t in range(5):
        np.testing.assert_allclose(out[t], rope_oracle(x[t], 3 + t, 4), atol=1e-12)
    np.testing.assert_allclose(rope_apply(out, 3, 4, inverse=True), x, atol=1e-12)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ValueError, match="even head_dim"):
        rope_apply(np.zeros((2, 6)), 0, 2)


def test_hadamard_mix_examples():
    spec = HadamardSpec.sylvester(1)
    out, _ = hadamard_mix_forward(np.array([[1.0, 0.0]]), np.ones(2), np.zeros(2), spec)
    np.testing.assert_allclose(out, [[1 / math.sqrt(2), 1 / math.sqrt(2)]])
    out, _ = hadamard_mix_forward(np.array([[0.0, 1.0]]), np.array([2.0, 3.0]), np.array([1.0, -1.0]), spec)
    np.testing.assert_allclose(out, [[1 + 2 / math.sqrt(2), -1 - 3 / math.sqrt(2)]])


@pytest.mark.parametrize("d", [4, 12, 24, 768])
def test_hadamard_mix_matches_matrix_oracle(d, rng):
    spec = HadamardSpec.for_order(d)
    H = build_hadamard_matrix(spec)
    Y = rng.standard_normal((3, d))
    a = rng.standard_normal(d)
    b = rng.standard_normal(d)
    out, _ = hadamard_mix_forward(Y, a, b, spec)
    np.testing.assert_allclose(out, a * (Y @ H) + b, atol=1e-12)


@pytest.mark.parametrize("d", [8, 12, 24])
def test_hadamard_mix_backward_fd(d, rng):
    spec = HadamardSpec.for_order(d)
    Y = rng.standard_normal((2, 3, d))
    a = rng.standard_normal(d)
    b = rng.standard_normal(d)
    R = rng.standard_normal((2, 3, d))
    _, YH = hadamard_mix_forward(Y, a, b, spec)
    dY, da, db = hadamard_mix_backward(YH, a, spec, R)
    H = build_hadamard_matrix(spec)
    np.testing.assert_allclose(dY, (R * a) @ H.T, atol=1e-12)
    np.testing.assert_allclose(da, np.sum(R * (Y @ H), axis=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(db, R.sum(axis=(0, 1)), atol=1e-12)


def test_hadamard_mix_shape_errors():
    with pytest.raises(ValueError, match="shapes disagree"):
        hadamard_mix_forward(np.zeros((1, 4)), np.ones(8), np.zeros(8), HadamardSpec.sylvester(3))


@pytest.mark.parametrize("d", [8, 16, 64, 768])
def test_variant_equivalence(d, rng):
    """alpha=1, beta=0 Hadamard mix equals a dense mix with W_O = H, b_o = 0."""
    spec = HadamardSpec.for_order(d)
    Y = rng.standard_normal((4, d)).astype(np.float32)
    had, _ = hadamard_mix_forward(Y, np.ones(d, np.float32), np.zeros(d, np.float32), spec)
    dense = dense_mix_forward(Y, build_hadamard_matrix(spec, dtype=np.float32), np.zeros(d, np.float32))
    assert np.max(np.abs(had - dense)) < 1e-5


@pytest.mark.parametrize("variant", ["dense", "hadamard"])
def test_attention_matches_oracle(variant, rng):
    w = AttentionWeights.init(16, variant, seed=3, dtype=np.float64)
    if variant == "hadamard":
        w.alpha.value[:] = rng.standard_normal(16)
        w.beta.value[:] = rng.standard_normal(16)
    X = rng.standard_normal((6, 16))
    out, _ = attention_forward(X, w, 2)
    np.testing.assert_allclose(out, attention_oracle(X, w, 2), atol=1e-12)


def test_attention_batched_equals_per_sequence(rng):
    w = AttentionWeights.init(16, "hadamard", seed=1)
    X = rng.standard_normal((3, 5, 16)).astype(np.float32)
    out, _ = attention_forward(X, w, 4)
    for b in range(3):
        np.testing.assert_allclose(out[b], attention_forward(X[b], w, 4)[0], atol=1e-6)


@pytest.mark.parametrize("variant", ["dense", "hadamard"])
def test_causality_bit_identical(variant, rng):
    w = AttentionWeights.init(16, variant, seed=0)
    X = rng.standard_normal((1, 8, 16)).astype(np.float32)
    X2 = X.copy()
    X2[:, 5:] = rng.standard_normal((1, 3, 16))
    a, _ = attention_forward(X, w, 2)
    b, _ = attention_forward(X2, w, 2)
    np.testing.assert_array_equal(a[:, :5], b[:, :5])


@pytest.mark.parametrize("variant", ["dense", "hadamard"])
@pytest.mark.parametrize("d", [16, 24])
def test_prefill_then_decode_matches_full(variant, d, rng):
    w = AttentionWeights.init(d, variant, seed=2)
    X = rng.standard_normal((2, 9, d)).astype(np.float32)
    full, _ = attention_forward(X, w, 2)
    cache = LayerKV(2, 9, d)
    parts = [attention_forward(X[:, :4], w, 2, cache=cache)[0]]
    for t in range(4, 9):
        parts.append(attention_forward(X[:, t:t + 1], w, 2, cache=cache)[0])
    assert np.max(np.abs(np.concatenate(parts, axis=1) - full)) < 1e-5


def test_cache_overflow():
    w = AttentionWeights.init(8, "dense")
    cache = LayerKV(1, 2, 8)
    with pytest.raises(ValueError, match="overflow"):
        attention_forward(np.zeros((1, 3, 8), np.float32), w, 2, cache=cache)


@pytest.mark.parametrize("d", [8, 16, 64, 768])
def test_parameter_census(d):
    dense = sum(p.size for p in AttentionWeights.init(d, "dense").params())
    had = sum(p.size for p in AttentionWeights.init(d, "hadamard").params())
    assert dense == 4 * d * d + d
    assert had == 3 * d * d + 2 * d
    assert dense - had == d * d - d


def test_common_init_shared_between_variants():
    a = AttentionWeights.init(16, "dense", seed=5)
    b = AttentionWeights.init(16, "hadamard", seed=5)
    for name in ("w_q", "w_k", "w_v"):
        np.testing.assert_array_equal(getattr(a, name).value, getattr(b, name).value)
    np.testing.assert_array_equal(b.alpha.value, 1)
    np.testing.assert_array_equal(b.beta.value, 0)


def test_weights_validation():
    w = AttentionWeights.init(8, "dense")
    with pytest.raises(ValueError, match="needs alpha"):
        AttentionWeights(w.w_q, w.w_k, w.w_v, AttentionVariant.HADAMARD, w_o=w.w_o, b_o=w.b_o)
    with pytest.raises(ValueError, match="unknown attention variant"):
        AttentionVariant.parse("sparse")


def test_decode_mix_ops(rng):
    d = 512
    for variant, key, expected in [("dense", "mix_mac", d * d), ("hadamard", "fwht_addsub", d * 9)]:
        w = AttentionWeights.init(d, variant)
        with nx.count_ops() as c:
            attention_forward(rng.standard_normal((1, 1, d)).astype(np.float32), w, 8)
        assert c[key] == expected


@pytest.mark.parametrize("variant", ["dense", "hadamard"])
@pytest.mark.parametrize("seed", [0, 1])
def test_attention_gradcheck(variant, seed):
    errs = attention_gradcheck(variant, seed=seed)
    assert set(errs) >= {"X", "attn.w_q", "attn.w_k", "attn.w_v"}
    assert max(errs.values()) < 1e-3, errs


def test_attention_gradcheck_composite_order():
    errs = attention_gradcheck("hadamard", d=24, n_heads=2, seed=0, max_entries=24)
    assert max(errs.values()) < 1e-3, errs


def test_rel_error_definition():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
