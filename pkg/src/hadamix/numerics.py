"""Small tensor kernels with explicit forward and backward functions.

Tensors are plain ``numpy.ndarray`` objects. The model runs in float32, but
every kernel preserves the dtype it is given so gradient checks can run the
same code in float64. Nothing broadcasts implicitly: shapes are checked and
mismatches raise ``ValueError``.
"""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field

import numba
import numpy as np

DTYPE = np.float32
NORM_EPS = 1e-5


# ---------------------------------------------------------------------------
# op counting
# ---------------------------------------------------------------------------

class OpCounter:
    """Tally of arithmetic work recorded by the kernels while active.

    Keys are op kinds, e.g. ``"mac"`` for multiply-accumulates in dense
    products, ``"mix_mac"`` for the dense output projection, ``"fwht_addsub"``
    for butterfly additions/subtractions and ``"affine"`` for elementwise
    scale/shift work in the mixing layers.
    """

    def __init__(self):
        self.counts = Counter()

    def __getitem__(self, kind):
        return self.counts[kind]

    def flops(self):
        # a multiply-accumulate is two flops; add/subs and affine ops are one
        macs = sum(v for k, v in self.counts.items() if k.endswith("mac"))
        rest = sum(v for k, v in self.counts.items() if not k.endswith("mac"))
        return 2 * macs + rest


_active_counters: list[OpCounter] = []


@contextmanager
def count_ops():
    counter = OpCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def record(kind, n):
    for c in _active_counters:
        c.counts[kind] += int(n)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    decay: bool = True

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------

def matmul(A, B, tag="mac"):
    _check(A.ndim == 2 and B.ndim == 2, f"matmul expects 2-D operands, got {A.shape} and {B.shape}")
    _check(A.shape[1] == B.shape[0], f"matmul inner extents differ: {A.shape} @ {B.shape}")
    record(tag, A.shape[0] * A.shape[1] * B.shape[1])
    return A @ B


def matmul_backward(A, B, G, tag="mac"):
    """Return ``(dA, dB)`` for ``C = A @ B`` given upstream ``G = dL/dC``."""
    _check(G.shape == (A.shape[0], B.shape[1]), f"upstream shape {G.shape} != output shape {(A.shape[0], B.shape[1])}")
    record(tag, 2 * A.shape[0] * A.shape[1] * B.shape[1])
    return G @ B.T, A.T @ G


def bmm(A, B, tag="mac"):
    """Batched product over a shared leading axis: (b, n, k) @ (b, k, p)."""
    _check(A.ndim == 3 and B.ndim == 3, f"bmm expects 3-D operands, got {A.shape} and {B.shape}")
    _check(A.shape[0] == B.shape[0] and A.shape[2] == B.shape[1], f"bmm shapes incompatible: {A.shape} @ {B.shape}")
    record(tag, A.shape[0] * A.shape[1] * A.shape[2] * B.shape[2])
    return np.matmul(A, B)


def bmm_backward(A, B, G, tag="mac"):
    _check(G.shape == (A.shape[0], A.shape[1], B.shape[2]), f"upstream shape {G.shape} does not match bmm output")
    record(tag, 2 * A.shape[0] * A.shape[1] * A.shape[2] * B.shape[2])
    return np.matmul(G, B.transpose(0, 2, 1)), np.matmul(A.transpose(0, 2, 1), G)


@numba.njit(cache=True)
def _naive_matmul_kernel(A, B, C):
    n, k = A.shape
    p = B.shape[1]
    for i in range(n):
        for kk in range(k):
            a = A[i, kk]
            for j in range(p):
                C[i, j] += a * B[kk, j]
    return C


def naive_matmul(A, B):
    """Plain i-k-j triple loop, compiled. No blocking, no BLAS.

    This is the repository's own dense kernel; its summation order per output
    element is fixed (k ascending), so results do not depend on threading.
    """
    _check(A.ndim == 2 and B.ndim == 2 and A.shape[1] == B.shape[0], f"matmul inner extents differ: {A.shape} @ {B.shape}")
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B, dtype=A.dtype)
    record("mac", A.shape[0] * A.shape[1] * B.shape[1])
    return _naive_matmul_kernel(A, B, np.zeros((A.shape[0], B.shape[1]), dtype=A.dtype))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax_rows(X):
    """Softmax over the last axis with the row max subtracted first.

    Entries equal to ``-inf`` get exactly zero weight.
    """
    m = np.max(X, axis=-1, keepdims=True)
    e = np.exp(X - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(P, G):
    _check(P.shape == G.shape, f"upstream shape {G.shape} != softmax output {P.shape}")
    return P * (G - np.sum(G * P, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=NORM_EPS):
    """Returns ``(out, cache)``; ``cache`` feeds :func:`layer_norm_backward`."""
    _check(gain.shape == (x.shape[-1],) and bias.shape == (x.shape[-1],), "layer_norm gain/bias must match last extent")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_backward(cache, G):
    xhat, rstd, gain = cache
    _check(G.shape == xhat.shape, f"upstream shape {G.shape} != layer_norm output {xhat.shape}")
    lead = tuple(range(G.ndim - 1))
    dgain = np.sum(G * xhat, axis=lead)
    dbias = np.sum(G, axis=lead)
    gx = G * gain
    dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def rms_norm(x, gain, eps=NORM_EPS):
    _check(gain.shape == (x.shape[-1],), "rms_norm gain must match last extent")
    rrms = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * rrms
    return xhat * gain, (xhat, rrms, gain)


def rms_norm_backward(cache, G):
    xhat, rrms, gain = cache
    _check(G.shape == xhat.shape, f"upstream shape {G.shape} != rms_norm output {xhat.shape}")
    dgain = np.sum(G * xhat, axis=tuple(range(G.ndim - 1)))
    gx = G * gain
    dx = rrms * (gx - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain


def norm_forward(kind, x, gain, bias=None):
    if kind == "layernorm":
        return layer_norm(x, gain, bias)
    if kind == "rmsnorm":
        return rms_norm(x, gain)
    raise ValueError(f"unknown norm kind {kind!r}; expected 'layernorm' or 'rmsnorm'")


def norm_backward(kind, cache, G):
    """Returns ``(dx, dgain, dbias)``; ``dbias`` is None for RMSNorm."""
    if kind == "layernorm":
        return layer_norm_backward(cache, G)
    dx, dgain = rms_norm_backward(cache, G)
    return dx, dgain, None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_backward(x, G):
    _check(x.shape == G.shape, "silu upstream shape mismatch")
    s = sigmoid(x)
    return G * (s * (1.0 + x * (1.0 - s)))


def add_backward(G):
    return G, G


def mul_backward(a, b, G):
    _check(a.shape == b.shape == G.shape, "mul operands and upstream must share a shape")
    return G * b, G * a
