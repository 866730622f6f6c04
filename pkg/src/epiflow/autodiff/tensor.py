"""Reverse-mode automatic differentiation over numpy arrays.

Graphs are recorded dynamically: every op applied to a tracked ``Tensor``
stores its parents and a closure that pushes the output gradient back into
the parents' gradient buffers. ``Tensor.backward`` walks the recorded graph
in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is NaN or infinite."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def _grad_buffer(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    # ---------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            if not np.all(np.isfinite(self.data)):
                raise NonFiniteError(f"non-finite loss: {self.data!r}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        # intermediate buffers are released as soon as they have been propagated
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            node.grad = None

    # ------------------------------------------------------------- operators
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. ``params``; disconnected params get exact zeros."""
    for p in params:
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _wrap(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    live = [p for p in parents if p.requires_grad]
    out.requires_grad = bool(live) and _GRAD_ENABLED
    if out.requires_grad:
        out._parents = tuple(live)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    b = as_tensor(b)
    return as_tensor(a, dtype=b.dtype), b


# ------------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _wrap(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _wrap(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _wrap(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _wrap(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _wrap(out, (x,), lambda g: x._accum(g * out))


def log(x: Tensor) -> Tensor:
    return _wrap(np.log(x.data), (x,), lambda g: x._accum(g / x.data))


def square(x: Tensor) -> Tensor:
    return _wrap(x.data * x.data, (x,), lambda g: x._accum(2.0 * g * x.data))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _wrap(out, (x,), lambda g: x._accum(g * (1.0 - out * out)))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _wrap(out, (x,), lambda g: x._accum(g * out * (1.0 - out)))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = x.data < 0
    expm1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(neg, alpha * expm1, x.data)
    return _wrap(out, (x,), lambda g: x._accum(g * np.where(neg, alpha * expm1 + alpha, 1.0)))


def soft_clamp(x: Tensor, bound: float) -> Tensor:
    """``bound * tanh(x / bound)``: identity near zero, saturating at +-bound."""
    t = np.tanh(x.data / bound)
    return _wrap(bound * t, (x,), lambda g: x._accum(g * (1.0 - t * t)))


# ------------------------------------------------------------ linear algebra
def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` where ``a`` has shape (..., n) and ``w`` is a 2-D (n, m) matrix."""
    a, w = _binary_operands(a, w)
    if w.ndim != 2:
        raise ValueError(f"matmul expects a 2-D right operand, got shape {w.shape}")
    if a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {w.shape}")
    out = a.data @ w.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, w.shape[1]))

    return _wrap(out, (a, w), backward)


# --------------------------------------------------------------- reductions
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _wrap(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ------------------------------------------------------------- shape ops
def reshape(x: Tensor, shape) -> Tensor:
    return _wrap(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        buf = x._grad_buffer()
        buf[idx] += g

    return _wrap(x.data[idx], (x,), backward)


def take(x: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer index array (duplicates allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g):
        buf = x._grad_buffer()
        moved = np.moveaxis(buf, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))

    return _wrap(np.take(x.data, indices, axis=axis), (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _wrap(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _wrap(out, tensors, backward)
