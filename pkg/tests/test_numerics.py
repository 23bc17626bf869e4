import math

import numpy as np
import pytest

from hadamix import numerics as nx
from hadamix.checks import rel_error


def loop_matmul(A, B):
    n, k = A.shape
    p = B.shape[1]
    C = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            for t in range(k):
                C[i, j] += A[i, t] * B[t, j]
    return C


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def test_matmul_example():
    A = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    B = np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32)
    np.testing.assert_array_equal(nx.matmul(A, B), [[19, 22], [43, 50]])


def test_matmul_matches_loop_oracle(rng):
    A = rng.standard_normal((5, 7)).astype(np.float32)
    B = rng.standard_normal((7, 3)).astype(np.float32)
    np.testing.assert_allclose(nx.matmul(A, B), loop_matmul(A.astype(float), B.astype(float)), atol=1e-5)


def test_matmul_shape_error():
    with pytest.raises(ValueError, match="inner extents"):
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_records_macs():
    with nx.count_ops() as c:
        nx.matmul(np.zeros((2, 3)), np.zeros((3, 5)), tag="mix_mac")
    assert c["mix_mac"] == 30
    assert c.flops() == 60


def test_counter_inactive_outside_context():
    nx.matmul(np.zeros((2, 2)), np.zeros((2, 2)))
    with nx.count_ops() as c:
        pass
    assert c.flops() == 0


def test_matmul_backward_fd(rng):
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    R = rng.standard_normal((3, 2))
    dA, dB = nx.matmul_backward(A, B, R)
    f = lambda: float(np.sum((A @ B) * R))
    assert rel_error(dA, fd_grad(f, A)) < 1e-6
    assert rel_error(dB, fd_grad(f, B)) < 1e-6


def test_bmm_backward_fd(rng):
    A = rng.standard_normal((2, 3, 4))
    B = rng.standard_normal((2, 4, 5))
    R = rng.standard_normal((2, 3, 5))
    dA, dB = nx.bmm_backward(A, B, R)
    f = lambda: float(np.sum(nx.bmm(A, B) * R))
    assert rel_error(dA, fd_grad(f, A)) < 1e-6
    assert rel_error(dB, fd_grad(f, B)) < 1e-6


def test_naive_matmul_matches_oracle(rng):
    A = rng.standard_normal((6, 9)).astype(np.float32)
    B = rng.standard_normal((9, 4)).astype(np.float32)
    np.testing.assert_allclose(nx.naive_matmul(A, B), loop_matmul(A.astype(float), B.astype(float)), atol=1e-5)
    assert nx.naive_matmul(A, B).dtype == np.float32


def test_naive_matmul_deterministic(rng):
    A = rng.standard_normal((32, 64)).astype(np.float32)
    B = rng.standard_normal((64, 16)).astype(np.float32)
    np.testing.assert_array_equal(nx.naive_matmul(A, B), nx.naive_matmul(A, B))


def softmax_oracle(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(np.zeros((1, 4))), [[0.25] * 4])
    out = nx.softmax_rows(np.array([[1000.0, 1000.0, -np.inf]]))
    np.testing.assert_array_equal(out, [[0.5, 0.5, 0.0]])


def test_softmax_matches_oracle(rng):
    X = rng.standard_normal((4, 6)) * 5
    out = nx.softmax_rows(X.astype(np.float32))
    for i in range(4):
        np.testing.assert_allclose(out[i], softmax_oracle(X[i]), rtol=1e-5, atol=1e-7)


def test_softmax_large_inputs_stable():
    out = nx.softmax_rows(np.array([[1e4, 0.0], [-1e4, 0.0]], dtype=np.float32))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1, 0], [0, 1]])


def test_softmax_backward_uniform_upstream_is_zero(rng):
    P = nx.softmax_rows(rng.standard_normal((3, 5)))
    np.testing.assert_allclose(nx.softmax_rows_backward(P, np.ones_like(P)), 0, atol=1e-15)


def test_softmax_backward_fd(rng):
    X = rng.standard_normal((2, 5))
    R = rng.standard_normal((2, 5))
    d = nx.softmax_rows_backward(nx.softmax_rows(X), R)
    assert rel_error(d, fd_grad(lambda: float(np.sum(nx.softmax_rows(X) * R)), X)) < 1e-6


def test_layer_norm_example():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out, _ = nx.layer_norm(x, np.ones(4), np.zeros(4))
    std = math.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out, [[-1.5 / std, -0.5 / std, 0.5 / std, 1.5 / std]], rtol=1e-12)


def test_rms_norm_example():
    x = np.array([[3.0, 4.0]])
    out, _ = nx.rms_norm(x, np.array([1.0, 2.0]))
    r = math.sqrt(12.5 + 1e-5)
    np.testing.assert_allclose(out, [[3 / r, 8 / r]], rtol=1e-12)


@pytest.mark.parametrize("kind", ["layernorm", "rmsnorm"])
def test_norm_backward_fd(kind, rng):
    x = rng.standard_normal((2, 3, 6))
    gain = rng.standard_normal(6)
    bias = rng.standard_normal(6)
    R = rng.standard_normal((2, 3, 6))

    def f():
        return float(np.sum(nx.norm_forward(kind, x, gain, bias)[0] * R))

    out, cache = nx.norm_forward(kind, x, gain, bias)
    dx, dgain, dbias = nx.norm_backward(kind, cache, R)
    assert rel_error(dx, fd_grad(f, x)) < 1e-6
    assert rel_error(dgain, fd_grad(f, gain)) < 1e-6
    if kind == "layernorm":
        assert rel_error(dbias, fd_grad(f, bias)) < 1e-6
    else:
        assert dbias is None


def test_norm_unknown_kind():
    with pytest.raises(ValueError, match="unknown norm"):
        nx.norm_forward("batchnorm", np.zeros((1, 2)), np.ones(2))


def test_silu_values():
    assert nx.silu(np.array(0.0)) == 0.0
    assert nx.silu_backward(np.array([0.0]), np.array([1.0]))[0] == 0.5
    np.testing.assert_allclose(nx.silu(np.array([1.0])), [1 / (1 + math.exp(-1))], rtol=1e-12)


def test_silu_backward_fd(rng):
    x = rng.standard_normal(7) * 3
    R = rng.standard_normal(7)
    assert rel_error(nx.silu_backward(x, R), fd_grad(lambda: float(np.sum(nx.silu(x) * R)), x)) < 1e-6


def test_mul_add_backward():
    a, b, g = np.array([2.0]), np.array([3.0]), np.array([5.0])
    assert nx.mul_backward(a, b, g) == (15.0, 10.0)
    assert nx.add_backward(g) == (g, g)


def test_param_tensor_zero_grad():
    p = nx.ParamTensor("w", np.ones((2, 3), np.float32))
    assert p.grad.shape == (2, 3) and p.size == 6 and p.shape == (2, 3)
    p.grad += 1
    p.zero_grad()
    assert not p.grad.any()
