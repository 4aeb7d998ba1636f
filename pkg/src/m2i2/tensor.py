"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape is rebuilt on every forward pass: each Tensor produced by an
operation remembers its parent tensors and a closure that maps the output
gradient to parent-gradient contributions. ``backward()`` on a scalar walks
the graph in reverse topological order and accumulates ``.grad`` on every
visited tensor, so intermediate activations (e.g. captured attention maps)
expose gradients too, not just leaf parameters.

Everything is float64. Any forward result containing NaN/Inf raises
NumericsError instead of propagating silently.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericsError("operation produced non-finite values")
        if any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
        return Tensor(data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- elementwise arithmetic -----------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g, a=self):
            _accum(a, -g)

        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out_data = self.data / other.data

        def bwd(g, a=self, b=other):
            _accum(a, _unbroadcast(g / b.data, a.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._lift(other) / self

    def __pow__(self, p: float) -> "Tensor":
        out_data = self.data**p

        def bwd(g, a=self):
            _accum(a, g * p * a.data ** (p - 1))

        return Tensor._make(out_data, (self,), bwd)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bwd(g, a=self, o=out_data):
            _accum(a, g * o)

        return Tensor._make(out_data, (self,), bwd)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def bwd(g, a=self):
            _accum(a, g / a.data)

        return Tensor._make(out_data, (self,), bwd)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g, a=self, o=out_data):
            _accum(a, g * (1.0 - o * o))

        return Tensor._make(out_data, (self,), bwd)

    def sqrt(self) -> "Tensor":
        return self**0.5

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def bwd(g, a=self):
            _accum(a, g * (a.data > 0.0))

        return Tensor._make(out_data, (self,), bwd)

    def gelu(self) -> "Tensor":
        """GELU, tanh approximation (the same formula the gradient checks use)."""
        x = self.data
        inner = GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def bwd(g, a=self, t=t):
            x = a.data
            dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

        return Tensor._make(out_data, (self,), bwd)

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.shape))

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ---- shape manipulation ---------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g, a=self):
            _accum(a, g.reshape(a.shape))

        return Tensor._make(out_data, (self,), bwd)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bwd(g, a=self):
            _accum(a, g.transpose(inv))

        return Tensor._make(out_data, (self,), bwd)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        out_data = np.broadcast_to(self.data, shape)

        def bwd(g, a=self):
            _accum(a, _unbroadcast(g, a.shape))

        return Tensor._make(np.ascontiguousarray(out_data), (self,), bwd)

    def __getitem__(self, key) -> "Tensor":
        out_data = self.data[key]

        def bwd(g, a=self):
            buf = np.zeros(a.shape)
            if _is_advanced(key):
                np.add.at(buf, key, g)
            else:
                # incoming grads may carry stray singleton dims relative to
                # the sliced view; realign before accumulating
                buf[key] += np.reshape(g, np.shape(buf[key]))
            _accum(a, buf)

        return Tensor._make(np.ascontiguousarray(out_data), (self,), bwd)

    # ---- linear algebra --------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._lift(other)
        if self.ndim < 1 or other.ndim < 2:
            raise ShapeError(f"matmul needs matrices, got {self.shape} @ {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {self.shape} @ {other.shape}")
        out_data = np.matmul(self.data, other.data)

        def bwd(g, a=self, b=other):
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __matmul__ = matmul

    # ---- backward --------------------------------------------------------

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar through the tape."""
        if self.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward root does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# ---- composite / fused ops ----------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=ts):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return Tensor._make(out_data, ts, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if x.shape == () or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=x, p=p):
        _accum(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return Tensor._make(p, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def bwd(g, a=x, p=p):
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        gg = g * gain.data
        _accum(
            x,
            inv
            * (
                gg
                - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return Tensor._make(out_data, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows, fused for stability."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [rows, classes], got {logits.shape}")
    b, n = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} != ({b},)")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= n:
        raise IndexError(f"target index out of range [0, {n})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out_data = -logp[np.arange(b), targets].mean()

    def bwd(g, a=logits, logp=logp):
        d = np.exp(logp)
        d[np.arange(b), targets] -= 1.0
        _accum(a, g * d / b)

    return Tensor._make(np.asarray(out_data), (logits,), bwd)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: table [b, M, d], idx [b, N] -> [b, N, d]."""
    idx = np.asarray(idx, dtype=np.int64)
    b = table.shape[0]
    out_data = table.data[np.arange(b)[:, None], idx]

    def bwd(g, a=table):
        buf = np.zeros(a.shape)
        np.add.at(buf, (np.arange(b)[:, None], idx), g)
        _accum(a, buf)

    return Tensor._make(out_data, (table,), bwd)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
