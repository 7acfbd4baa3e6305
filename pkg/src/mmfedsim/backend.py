"""Numeric kernel backends.

The training hot path is dominated by many small batched attention
forward/backward passes and embedding-gradient scatter-adds. Those kernels
live here twice: a numba ``@njit`` version and a pure-numpy fallback with
identical semantics (same shapes, same float64 math).

Backend selection, in order:

1. ``MMFEDSIM_BACKEND`` environment variable: ``numba``, ``numpy`` or
   ``auto`` (default). ``auto`` picks numba when it imports, numpy
   otherwise. Asking for ``numba`` when it is unavailable is an error.
2. :func:`set_backend` switches at runtime (used by the equivalence tests
   and the benchmark, which need both in one process).

All kernels take and return contiguous float64 arrays; token id arrays are
int64.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

ENV_VAR = "MMFEDSIM_BACKEND"

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _attn_forward_np(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Batched scaled dot-product attention.

    q: (B, nq, d), k/v: (B, nk, d). Returns (out, p) with
    out: (B, nq, d) and p: (B, nq, nk) the row-stochastic weights
    softmax(q @ k^T / sqrt(d)).
    """
    d = q.shape[2]
    scores = np.matmul(q, np.swapaxes(k, 1, 2)) / np.sqrt(d)
    scores -= scores.max(axis=2, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=2, keepdims=True)
    out = np.matmul(p, v)
    return out, p


def _attn_backward_np(q, k, v, p, dout):
    """Gradients of scaled dot-product attention given saved weights p."""
    d = q.shape[2]
    scale = 1.0 / np.sqrt(d)
    dv = np.matmul(np.swapaxes(p, 1, 2), dout)
    dp = np.matmul(dout, np.swapaxes(v, 1, 2))
    ds = p * (dp - np.sum(dp * p, axis=2, keepdims=True))
    dq = scale * np.matmul(ds, k)
    dk = scale * np.matmul(np.swapaxes(ds, 1, 2), q)
    return dq, dk, dv


def _scatter_add_rows_np(acc: np.ndarray, ids: np.ndarray, grads: np.ndarray) -> None:
    """acc[ids[m]] += grads[m] for every m, with repeated ids accumulated."""
    np.add.at(acc, ids, grads)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def _attn_forward_nb(q, k, v):
        B, nq, d = q.shape
        nk = k.shape[1]
        scale = 1.0 / np.sqrt(d)
        out = np.empty((B, nq, d))
        p = np.empty((B, nq, nk))
        for b in range(B):
            scores = np.dot(q[b], k[b].T)
            for i in range(nq):
                m = -np.inf
                for j in range(nk):
                    s = scores[i, j] * scale
                    scores[i, j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(nk):
                    e = np.exp(scores[i, j] - m)
                    scores[i, j] = e
                    z += e
                for j in range(nk):
                    p[b, i, j] = scores[i, j] / z
            out[b] = np.dot(p[b], v[b])
        return out, p

    @njit(cache=True, nogil=True)
    def _attn_backward_nb(q, k, v, p, dout):
        B, nq, d = q.shape
        nk = k.shape[1]
        scale = 1.0 / np.sqrt(d)
        dq = np.empty_like(q)
        dk = np.empty_like(k)
        dv = np.empty_like(v)
        ds = np.empty((nq, nk))
        for b in range(B):
            dv[b] = np.dot(p[b].T, dout[b])
            dp = np.dot(dout[b], v[b].T)
            for i in range(nq):
                dot = 0.0
                for j in range(nk):
                    dot += dp[i, j] * p[b, i, j]
                for j in range(nk):
                    ds[i, j] = scale * p[b, i, j] * (dp[i, j] - dot)
            dq[b] = np.dot(ds, k[b])
            dk[b] = np.dot(ds.T, q[b])
        return dq, dk, dv

    @njit(cache=True, nogil=True)
    def _scatter_add_rows_nb(acc, ids, grads):
        for m in range(ids.shape[0]):
            r = ids[m]
            for c in range(acc.shape[1]):
                acc[r, c] += grads[m, c]


@dataclass(frozen=True)
class Kernels:
    name: str
    attn_forward: Callable
    attn_backward: Callable
    scatter_add_rows: Callable


_NUMPY_KERNELS = Kernels(
    name="numpy",
    attn_forward=_attn_forward_np,
    attn_backward=_attn_backward_np,
    scatter_add_rows=_scatter_add_rows_np,
)

_NUMBA_KERNELS = (
    Kernels(
        name="numba",
        attn_forward=_attn_forward_nb,
        attn_backward=_attn_backward_nb,
        scatter_add_rows=_scatter_add_rows_nb,
    )
    if NUMBA_AVAILABLE
    else None
)


def get_kernels(name: str) -> Kernels:
    if name == "numpy":
        return _NUMPY_KERNELS
    if name == "numba":
        if _NUMBA_KERNELS is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _NUMBA_KERNELS
    raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


def _initial_backend() -> Kernels:
    requested = os.environ.get(ENV_VAR, "auto").strip().lower()
    if requested == "auto":
        return _NUMBA_KERNELS if NUMBA_AVAILABLE else _NUMPY_KERNELS
    return get_kernels(requested)


_active: Kernels = _initial_backend()


def set_backend(name: str) -> None:
    """Switch the active kernel backend ('numba' or 'numpy')."""
    global _active
    _active = get_kernels(name)


def active_backend() -> str:
    return _active.name


# Dispatchers used by the autodiff ops; resolved per call so set_backend
# takes effect immediately.


def attn_forward(q, k, v):
    return _active.attn_forward(q, k, v)


def attn_backward(q, k, v, p, dout):
    return _active.attn_backward(q, k, v, p, dout)


def scatter_add_rows(acc, ids, grads):
    _active.scatter_add_rows(acc, ids, grads)
