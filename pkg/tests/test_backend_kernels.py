"""Equivalence and contract tests for the numba/numpy kernel pair."""

import numpy as np
import pytest

from mmfedsim import backend


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _shapes():
    return [(1, 1, 1), (2, 3, 4), (16, 12, 16), (5, 1, 8), (3, 7, 2)]


@pytest.mark.skipif(not backend.NUMBA_AVAILABLE, reason="numba not available")
class TestBackendEquivalence:
    def test_attn_forward_matches(self, rng):
        nb = backend.get_kernels("numba")
        np_ = backend.get_kernels("numpy")
        for b, n, d in _shapes():
            q = rng.standard_normal((b, n, d))
            k = rng.standard_normal((b, n + 1, d))
            v = rng.standard_normal((b, n + 1, d))
            out_a, p_a = nb.attn_forward(q, k, v)
            out_b, p_b = np_.attn_forward(q, k, v)
            np.testing.assert_allclose(out_a, out_b, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(p_a, p_b, rtol=1e-12, atol=1e-14)

    def test_attn_backward_matches(self, rng):
        nb = backend.get_kernels("numba")
        np_ = backend.get_kernels("numpy")
        for b, n, d in _shapes():
            q = rng.standard_normal((b, n, d))
            k = rng.standard_normal((b, n + 2, d))
            v = rng.standard_normal((b, n + 2, d))
            _, p = np_.attn_forward(q, k, v)
            dout = rng.standard_normal((b, n, d))
            grads_a = nb.attn_backward(q, k, v, p, dout)
            grads_b = np_.attn_backward(q, k, v, p, dout)
            for ga, gb in zip(grads_a, grads_b):
                np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-14)

    def test_scatter_add_matches(self, rng):
        nb = backend.get_kernels("numba")
        np_ = backend.get_kernels("numpy")
        ids = rng.integers(0, 10, size=64)
        grads = rng.standard_normal((64, 5))
        acc_a = np.zeros((10, 5))
        acc_b = np.zeros((10, 5))
        nb.scatter_add_rows(acc_a, ids, grads)
        np_.scatter_add_rows(acc_b, ids, grads)
        np.testing.assert_allclose(acc_a, acc_b, rtol=1e-12, atol=1e-15)


def test_softmax_rows_sum_to_one(kernel_backend, rng):
    q = rng.standard_normal((4, 6, 8))
    k = rng.standard_normal((4, 9, 8))
    v = rng.standard_normal((4, 9, 8))
    _, p = backend.attn_forward(q, k, v)
    np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_single_kv_attention_returns_value_row(kernel_backend, rng):
    q = rng.standard_normal((3, 5, 4))
    k = rng.standard_normal((3, 1, 4))
    v = rng.standard_normal((3, 1, 4))
    out, p = backend.attn_forward(q, k, v)
    np.testing.assert_allclose(p, 1.0, atol=1e-15)
    for i in range(5):
        np.testing.assert_allclose(out[:, i, :], v[:, 0, :], atol=1e-15)


def test_scatter_add_accumulates_repeats(kernel_backend):
    acc = np.zeros((3, 2))
    ids = np.array([1, 1, 1, 0], dtype=np.int64)
    grads = np.ones((4, 2))
    backend.scatter_add_rows(acc, ids, grads)
    np.testing.assert_array_equal(acc, [[1.0, 1.0], [3.0, 3.0], [0.0, 0.0]])


def test_set_backend_roundtrip():
    original = backend.active_backend()
    backend.set_backend("numpy")
    assert backend.active_backend() == "numpy"
    backend.set_backend(original)
    with pytest.raises(ValueError):
        backend.set_backend("fortran")
