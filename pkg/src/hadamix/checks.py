"""Self-checks: FWHT against explicit matrices, and finite-difference gradients.

These back the ``selftest`` CLI command. Central differences are taken in
float64: at ``h = 1e-3`` float32 round-off alone is on the order of the
1e-3 tolerance.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .attention import AttentionWeights, attention_backward, attention_forward
from .model import ModelConfig, TransformerModel
from .wht import HadamardSpec, build_hadamard_matrix, fwht_batch


def supported_orders(max_order=4096):
    orders = []
    d = 1
    while d <= max_order:
        orders.append(d)
        d *= 2
    d = 12
    while d <= min(max_order, 1536):
        orders.append(d)
        d *= 2
    return orders


def rel_error(analytic, numeric):
    """Max-abs difference relative to the larger max-abs of the two."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_wht_order(d, rows=4, seed=0):
    """Return ``(oracle_err, roundtrip_err, ops_ok)`` for order ``d``."""
    spec = HadamardSpec.for_order(d)
    H = build_hadamard_matrix(spec, dtype=np.float64)
    Y = np.random.default_rng(seed).standard_normal((rows, d)).astype(np.float32)
    with nx.count_ops() as c:
        fwd = fwht_batch(Y, spec)
    ref = Y.astype(np.float64) @ H.T
    oracle = float(np.max(np.abs(fwd - ref)) / np.max(np.abs(ref)))
    back = fwht_batch(fwht_batch(Y, spec, adjoint=True), spec)
    roundtrip = float(np.max(np.abs(back - Y)) / np.max(np.abs(Y)))
    ops_ok = c["fwht_addsub"] == rows * spec.addsub_count()
    return oracle, roundtrip, ops_ok


def _numeric(loss, arr, idx, h):
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        up = loss()
        flat[i] = orig - h
        down = loss()
        flat[i] = orig
        out[j] = (up - down) / (2 * h)
    return out


def _sample(rng, size, limit):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def attention_gradcheck(variant, d=16, n_heads=2, T=4, batch=2, seed=0, h=1e-3, max_entries=None):
    """Errors for every attention parameter and the input, keyed by name."""
    rng = np.random.default_rng(seed)
    w = AttentionWeights.init(d, variant, seed=seed, dtype=np.float64)
    for p in w.params():
        # move off the init point so alpha/beta/bias gradients are generic
        p.value[...] = p.value + rng.standard_normal(p.shape) * 0.3
    X = rng.standard_normal((batch, T, d))
    R = rng.standard_normal((batch, T, d))

    def loss():
        return float(np.sum(attention_forward(X, w, n_heads)[0] * R))

    _, ctx = attention_forward(X, w, n_heads)
    dX = attention_backward(R, w, n_heads, ctx)
    errs = {}
    for name, arr, grad in [("X", X, dX)] + [(p.name, p.value, p.grad) for p in w.params()]:
        idx = _sample(rng, arr.size, max_entries)
        errs[name] = rel_error(grad.reshape(-1)[idx], _numeric(loss, arr, idx, h))
    return errs


def model_gradcheck(variant, d=16, n_heads=2, vocab=32, n_layers=1, T=5, batch=2, seed=0, h=1e-3,
                    max_entries=None, norm_kind="layernorm"):
    """Errors for every model parameter, keyed by name."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=n_layers, d_model=d, n_heads=n_heads, vocab_size=vocab, variant=variant,
                      context_length=T, norm_kind=norm_kind)
    model = TransformerModel(cfg, seed=seed, dtype=np.float64)
    for p in model.params():
        p.value[...] = p.value + rng.standard_normal(p.shape) * 0.3
    tokens = rng.integers(0, vocab, (batch, T))
    targets = rng.integers(0, vocab, (batch, T))
    model.zero_grad()
    model.loss_and_grad(tokens, targets)
    errs = {}
    for p in model.params():
        idx = _sample(rng, p.size, max_entries)
        errs[p.name] = rel_error(p.grad.reshape(-1)[idx], _numeric(lambda: model.loss(tokens, targets), p.value, idx, h))
    return errs


def wht_suite(max_order=4096, tol=1e-5):
    """One result row per order: ``(d, passed, oracle_err, roundtrip_err, ops_ok)``."""
    rows = []
    for d in supported_orders(max_order):
        oracle, roundtrip, ops_ok = check_wht_order(d)
        rows.append((d, oracle < tol and roundtrip < tol and ops_ok, oracle, roundtrip, ops_ok))
    return rows


def gradient_suite(seeds=range(3), tol=2e-3, max_entries=16):
    """One result row per check: ``(label, passed, worst_err)``."""
    rows = []
    for variant in ("dense", "hadamard"):
        for seed in seeds:
            worst = max(attention_gradcheck(variant, seed=seed, max_entries=max_entries).values())
            rows.append((f"attention/{variant}/seed{seed}", worst < tol, worst))
            worst = max(model_gradcheck(variant, seed=seed, max_entries=max_entries).values())
            rows.append((f"model/{variant}/seed{seed}", worst < tol, worst))
    return rows
