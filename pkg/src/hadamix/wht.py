"""Hadamard matrices and the fast Walsh-Hadamard transform.

Two families of orders are supported:

* Sylvester orders ``2**m``: ``H_{2n} = [[H_n, H_n], [H_n, -H_n]]``.
* Composite orders ``12 * 2**m``: ``H_12 kron H_{2**m}``, where ``H_12`` is
  the Paley (type I) matrix built from the quadratic residues mod 11. This
  covers the common transformer widths 768 and 1536.

The library path never materializes a Hadamard matrix. The transform runs as
``m`` butterfly stages of pairwise add/subtract, and on composite orders is
followed by a 12-point signed mix across blocks.
:func:`build_hadamard_matrix` exists for oracles and for equivalence checks
against a dense layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import record

SUPPORTED_FAMILIES = "supported orders are 2**m (Sylvester) or 12 * 2**m (Paley-12 kron Sylvester)"


def is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class HadamardSpec:
    """Order and construction of a Hadamard matrix.

    ``factor`` is 1 for a plain Sylvester matrix and 12 for the composite
    ``H_12 kron H_{2**m}``; ``order == factor * 2**m``.
    """

    order: int
    factor: int = 1
    normalized: bool = True

    def __post_init__(self):
        if self.factor not in (1, 12):
            raise ValueError(f"unsupported Hadamard factor {self.factor}; {SUPPORTED_FAMILIES}")
        if self.order < 1 or self.order % self.factor or not is_power_of_two(self.order // self.factor):
            raise ValueError(f"order {self.order} does not fit factor {self.factor}; {SUPPORTED_FAMILIES}")

    @classmethod
    def sylvester(cls, m, normalized=True):
        return cls(order=2 ** m, factor=1, normalized=normalized)

    @classmethod
    def composite(cls, m, normalized=True):
        return cls(order=12 * 2 ** m, factor=12, normalized=normalized)

    @classmethod
    def for_order(cls, d, normalized=True):
        """Pick the family for width ``d`` or raise ``ValueError``."""
        if is_power_of_two(d):
            return cls(order=d, factor=1, normalized=normalized)
        if d % 12 == 0 and is_power_of_two(d // 12):
            return cls(order=d, factor=12, normalized=normalized)
        raise ValueError(f"unsupported Hadamard order {d}; {SUPPORTED_FAMILIES}")

    @property
    def block(self):
        return self.order // self.factor

    @property
    def m(self):
        return self.block.bit_length() - 1

    @property
    def symmetric(self):
        return self.factor == 1

    def addsub_count(self):
        """Add/sub operations per transformed vector."""
        if self.factor == 1:
            return self.order * self.m
        # 12 signed accumulations per output element in the cross-block mix
        return self.order * self.m + self.order * 12


def supported_order(d):
    try:
        HadamardSpec.for_order(d)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# explicit matrices (oracles)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _paley12():
    q = 11
    residues = {(x * x) % q for x in range(1, q)}

    def chi(a):
        a %= q
        return 0 if a == 0 else (1 if a in residues else -1)

    jacobsthal = np.array([[chi(j - i) for j in range(q)] for i in range(q)], dtype=np.int64)
    skew = np.zeros((q + 1, q + 1), dtype=np.int64)
    skew[0, 1:] = 1
    skew[1:, 0] = -1
    skew[1:, 1:] = jacobsthal
    h = np.eye(q + 1, dtype=np.int64) + skew
    h.setflags(write=False)
    return h


def paley12():
    """The 12x12 Paley type I Hadamard matrix (entries +-1, not symmetric)."""
    return _paley12().copy()


def _sylvester(m):
    h = np.ones((1, 1), dtype=np.int64)
    for _ in range(m):
        h = np.block([[h, h], [h, -h]])
    return h


def build_hadamard_matrix(spec, dtype=np.float64):
    """Materialize H for ``spec``. Quadratic in the order; tests only."""
    h = _sylvester(spec.m)
    if spec.factor == 12:
        h = np.kron(_paley12(), h)
    h = h.astype(dtype)
    if spec.normalized:
        h /= np.sqrt(spec.order)
    return h


# ---------------------------------------------------------------------------
# fast transforms
# ---------------------------------------------------------------------------

def fwht_in_place(v, normalized=False):
    """Overwrite ``v`` (last axis of length 2**m) with ``H @ v``.

    Each of the ``m`` stages pairs entries ``h`` apart and replaces them with
    their sum and difference. When ``normalized``, the ``2**(-m/2)`` factor
    is applied inside the last stage. Leading axes are independent rows.
    """
    v = np.asarray(v)
    n = v.shape[-1] if v.ndim else 0
    if not is_power_of_two(n):
        raise ValueError(f"FWHT length must be a power of two, got {n}")
    if not v.flags.c_contiguous or not v.flags.writeable:
        raise ValueError("fwht_in_place needs a writeable C-contiguous array")
    rows = v.size // n
    m = n.bit_length() - 1
    x = v.reshape(rows, n)
    scale = n ** -0.5 if normalized else None
    h = 1
    while h < n:
        y = x.reshape(rows, n // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        last = scale is not None and 2 * h == n
        t = a - b
        a += b
        if last:
            a *= scale
            t *= scale
        b[...] = t
        h *= 2
    record("fwht_addsub", rows * n * m)
    return v


def _mix12(x, normalized, adjoint, dtype):
    h12 = _paley12().T if adjoint else _paley12()
    coeff = h12.astype(dtype)
    if normalized:
        coeff = coeff * dtype.type(1.0 / np.sqrt(x.shape[-1] * 12))
    return coeff


def fwht_composite(v, normalized=True, adjoint=False):
    """Apply ``H_12 kron H_{2**m}`` (or its transpose) along the last axis.

    The vector is split into 12 contiguous blocks of length ``2**m``. Each
    block goes through the butterfly; the blocks are then combined with the
    12x12 Paley matrix. The normalization is folded into that final mix.
    Returns a new array.
    """
    v = np.asarray(v)
    n = v.shape[-1] if v.ndim else 0
    if n == 0 or n % 12 or not is_power_of_two(n // 12):
        raise ValueError(f"composite FWHT needs length 12 * 2**m, got {n}")
    block = n // 12
    rows = v.size // n
    x = np.array(v, copy=True, order="C").reshape(rows, 12, block)
    if block > 1:
        fwht_in_place(x, normalized=False)
    coeff = _mix12(x, normalized, adjoint, x.dtype)
    out = np.einsum("ij,rjb->rib", coeff, x, optimize=False)
    record("fwht_addsub", rows * n * 12)
    return out.reshape(v.shape)


def fwht_batch(Y, spec, adjoint=False):
    """Transform every row of ``Y`` along its last axis.

    Row ``i`` of the result is ``H @ Y[i]`` (``H.T @ Y[i]`` when ``adjoint``),
    so ``fwht_batch(Y) == Y @ H.T``. Sylvester matrices are symmetric and
    ignore ``adjoint``.
    """
    Y = np.asarray(Y)
    if Y.ndim == 0 or Y.shape[-1] != spec.order:
        raise ValueError(f"last extent {Y.shape[-1] if Y.ndim else None} does not match Hadamard order {spec.order}")
    if spec.factor == 1:
        out = np.array(Y, copy=True, order="C")
        return fwht_in_place(out, normalized=spec.normalized)
    return fwht_composite(Y, normalized=spec.normalized, adjoint=adjoint)
