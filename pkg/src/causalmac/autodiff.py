"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is built eagerly: every op returns a new Tensor that remembers its
parents and a closure accumulating gradients into them. ``backward`` on a
scalar walks the tape in reverse topological order. Arrays are always
float64; shapes follow numpy, with broadcasting limited to what the
networks here need (bias vectors against batches, column vectors against
matrices).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, UsageError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` of every reachable tensor with d(self)/d(tensor)."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar tensor, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _node(data, (a, b), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        x.accumulate(g * (x.data > 0.0))

    return _node(data, (x,), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bwd(g):
        x.accumulate(g * (1.0 - data * data))

    return _node(data, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500.0, 500.0)))

    def bwd(g):
        x.accumulate(g * data * (1.0 - data))

    return _node(data, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        x.accumulate(g * data)

    return _node(data, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def bwd(g):
        x.accumulate(g / x.data)

    return _node(data, (x,), bwd)


def square(x) -> Tensor:
    x = as_tensor(x)
    data = x.data * x.data

    def bwd(g):
        x.accumulate(g * 2.0 * x.data)

    return _node(data, (x,), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(gg, x.data.shape).copy())

    return _node(data, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g / denom, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(gg / denom, x.data.shape).copy())

    return _node(data, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Log-sum-exp stabilized softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x.accumulate(data * (g - dot))

    return _node(data, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bwd(g):
        x.accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (x,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)

    return _node(data, ts, bwd)


def slice_cols(x, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"slice_cols expects a 2-d tensor, got {x.data.shape}")
    data = x.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate(full)

    return _node(data, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        x.accumulate(g.reshape(x.data.shape))

    return _node(data, (x,), bwd)


def take_rows(x, index: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = x[i, index[i]]."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        x.accumulate(full)

    return _node(data, (x,), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; the gradient follows the selected branch (ties go to ``a``)."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return _node(data, (a, b), bwd)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient outside the active region."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        x.accumulate(g * inside)

    return _node(data, (x,), bwd)
