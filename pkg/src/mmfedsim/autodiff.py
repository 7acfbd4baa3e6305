"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery to differentiate the joint encoder and its losses:
a :class:`Tensor` wrapping an ndarray, a handful of primitive ops with
hand-written backward rules, and a topological-order backward pass. The
fused attention and embedding-gather primitives route through
:mod:`mmfedsim.backend`, which is where the numba/numpy split lives.

Every analytic gradient exposed here is covered by central-difference
checks in the test suite.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import backend


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """An ndarray plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass -----------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = _as_array(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad and node._backward is None:
        return
    node.grad = g if node.grad is None else node.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    data = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _make(data, (a, b), bwd)


def exp(a) -> Tensor:
    a = _ensure(a)
    data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = _ensure(a)
    data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), bwd)


def tanh(a) -> Tensor:
    a = _ensure(a)
    data = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _ensure(a)
    data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * 0.5 / data)

    return _make(data, (a,), bwd)


# -- reductions / shape ------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = list(np.shape(g))
            for ax in sorted(axes):
                shape.insert(ax, 1)
            gg = np.reshape(g, shape)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax % a.data.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _ensure(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inverse))

    return _make(data, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_ensure(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(data, tuple(ts), bwd)


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd)


# -- fused / lookup ops (backend kernels) --------------------------------------------


def attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over a batch of sequences.

    q: (B, nq, d); k, v: (B, nk, d). The softmax weights are saved for the
    backward pass.
    """
    q, k, v = _ensure(q), _ensure(k), _ensure(v)
    if k.data.shape[1] == 0:
        raise ValueError("attention requires a non-empty key/value sequence")
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    out, p = backend.attn_forward(qd, kd, vd)

    def bwd(g):
        dq, dk, dv = backend.attn_backward(qd, kd, vd, p, np.ascontiguousarray(g))
        _accumulate(q, dq)
        _accumulate(k, dk)
        _accumulate(v, dv)

    return _make(out, (q, k, v), bwd)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; gradient scatter-adds into the table."""
    table = _ensure(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def bwd(g):
        acc = np.zeros_like(table.data)
        cols = table.data.shape[1]
        backend.scatter_add_rows(
            acc, ids.ravel(), np.ascontiguousarray(g.reshape(-1, cols))
        )
        _accumulate(table, acc)

    return _make(data, (table,), bwd)
