"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a row-major float64 ndarray plus an optional
gradient buffer. Operations executed while a :class:`Tape` is active append
nodes in execution order, which is automatically topological; a single
:func:`backward` traversal then populates ``grad`` for every tensor with
``requires_grad`` reachable from the loss. Calling :func:`backward` again
without clearing grads accumulates into them.

Only the generic tensor algebra lives here; neural-network layers
(convolution, batch norm, LSTM) are built on top in ``deepair.layers``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sum_all",
    "mean_all",
    "relu",
    "sigmoid",
    "tanh_act",
    "row",
]


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_rec")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._rec = False  # produced by a recorded op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable tensor. Names are unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of executed operations for one reverse pass.

    Nodes are (outputs, backward_fn) pairs appended in execution order, so
    every node's inputs precede it. Use as a context manager; ops run
    outside any active tape skip recording entirely (cheap inference mode).
    """

    def __init__(self):
        self.nodes: list[tuple[tuple, Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def _tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._rec


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _record(tape: Tape, out: Tensor, fn: Callable[[], None]) -> None:
    out._rec = True
    tape.nodes.append(((out,), fn))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every tracked tensor reachable from a scalar loss.

    Grads of intermediate (op-produced) tensors are cleared per call, while
    leaf grads accumulate: calling backward twice doubles leaf grads.
    """
    if loss.data.ndim != 0:
        raise ValueError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    for outs, _ in tape.nodes:
        for o in outs:
            o.grad = None
    _accum(loss, np.asarray(1.0))
    for _, fn in reversed(tape.nodes):
        fn()


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    t = _tape()
    if t is not None and (_needs(a) or _needs(b)):
        def bwd():
            g = out.grad
            if g is None:
                return
            if _needs(a):
                _accum(a, g)
            if _needs(b):
                _accum(b, g)
        _record(t, out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    t = _tape()
    if t is not None and (_needs(a) or _needs(b)):
        def bwd():
            g = out.grad
            if g is None:
                return
            if _needs(a):
                _accum(a, g)
            if _needs(b):
                _accum(b, -g)
        _record(t, out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    t = _tape()
    if t is not None and (_needs(a) or _needs(b)):
        a_data, b_data = a.data, b.data
        def bwd():
            g = out.grad
            if g is None:
                return
            if _needs(a):
                _accum(a, g * b_data)
            if _needs(b):
                _accum(b, g * a_data)
        _record(t, out, bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    t = _tape()
    if t is not None and _needs(a):
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, g * c)
        _record(t, out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: [m,n]@[n,p] -> [m,p] or [m,n]@[n] -> [m]."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ValueError(
            f"matmul: unsupported operand ranks {a.data.ndim} and {b.data.ndim}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)
    t = _tape()
    if t is not None and (_needs(a) or _needs(b)):
        a_data, b_data = a.data, b.data
        def bwd():
            g = out.grad
            if g is None:
                return
            if b_data.ndim == 1:
                if _needs(a):
                    _accum(a, np.outer(g, b_data))
                if _needs(b):
                    _accum(b, a_data.T @ g)
            else:
                if _needs(a):
                    _accum(a, g @ b_data.T)
                if _needs(b):
                    _accum(b, a_data.T @ g)
        _record(t, out, bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    t = _tape()
    if t is not None and _needs(a):
        shape = a.data.shape
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, np.full(shape, float(g)))
        _record(t, out, bwd)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    t = _tape()
    if t is not None and _needs(a):
        shape = a.data.shape
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, np.full(shape, float(g) / n))
        _record(t, out, bwd)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    t = _tape()
    if t is not None and _needs(a):
        mask = a.data > 0.0  # subgradient 0 at the kink
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, g * mask)
        _record(t, out, bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)
    t = _tape()
    if t is not None and _needs(a):
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, g * s * (1.0 - s))
        _record(t, out, bwd)
    return out


def tanh_act(a: Tensor) -> Tensor:
    th = np.tanh(a.data)
    out = Tensor(th)
    t = _tape()
    if t is not None and _needs(a):
        def bwd():
            g = out.grad
            if g is None:
                return
            _accum(a, g * (1.0 - th * th))
        _record(t, out, bwd)
    return out


def row(a: Tensor, i: int) -> Tensor:
    """Select row i of a 2D tensor (copied, gradient scatters back)."""
    if a.data.ndim != 2:
        raise ValueError(f"row: expected 2D tensor, got shape {a.data.shape}")
    out = Tensor(a.data[i].copy())
    t = _tape()
    if t is not None and _needs(a):
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[i] += g
        _record(t, out, bwd)
    return out
