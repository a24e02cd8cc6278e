"""Reverse-mode autodiff over dense numpy arrays.

A Tensor wraps a row-major float array plus an optional gradient buffer.
Operations record backward closures on a tape; ``backward(loss)`` walks the
tape in reverse topological order and accumulates ``d loss / d leaf`` into
each leaf's ``grad`` buffer. Leaves created with ``requires_grad=True`` own a
zero-initialised grad buffer from birth, so parameters untouched by a loss
read back an exact zero gradient.

Forward values are checked for NaN/Inf as they are produced; a non-finite
result raises ``NonFiniteError`` instead of propagating silently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "GradError",
    "no_grad",
    "concat",
    "backward",
]


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GradError(RuntimeError):
    """Misuse of the gradient machinery (non-scalar loss, missing grad, ...)."""


_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaf parameters carry a live zero buffer; intermediates allocate lazily.
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        _check_finite(arr, "Tensor")

    # -- construction of op results -------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], None], op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
        return out

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- arithmetic --------------------------------------------------------

    @staticmethod
    def _coerce(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self
        data = -a.data

        def bw(g):
            a._accum(-g)

        return Tensor._from_op(data, (a,), bw, "neg")

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor._coerce(other, self) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        data = a.data * b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(data, (a, b), bw, "div")

    def __pow__(self, p: float):
        a = self
        data = a.data ** p

        def bw(g):
            a._accum(g * p * a.data ** (p - 1.0))

        return Tensor._from_op(data, (a,), bw, "pow")

    def __matmul__(self, other):
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError("matmul expects tensors of rank >= 2")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
        data = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accum(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accum(_unbroadcast(gb, b.data.shape))

        return Tensor._from_op(data, (a, b), bw, "matmul")

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = a.data.reshape(shape)

        def bw(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._from_op(data, (a,), bw, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        data = np.transpose(a.data, axes or None)
        inv = np.argsort(axes) if axes else None

        def bw(g):
            a._accum(np.transpose(g, inv))

        return Tensor._from_op(data, (a,), bw, "transpose")

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        data = np.swapaxes(a.data, ax1, ax2)

        def bw(g):
            a._accum(np.swapaxes(g, ax1, ax2))

        return Tensor._from_op(data, (a,), bw, "swapaxes")

    def __getitem__(self, idx):
        a = self
        data = a.data[idx]

        def bw(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)

        return Tensor._from_op(data, (a,), bw, "getitem")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

        return Tensor._from_op(np.asarray(data), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        a = self
        with np.errstate(over="ignore"):
            data = np.exp(a.data)

        def bw(g):
            a._accum(g * data)

        return Tensor._from_op(data, (a,), bw, "exp")

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(a.data)

        def bw(g):
            a._accum(g / a.data)

        return Tensor._from_op(data, (a,), bw, "log")

    def sqrt(self):
        a = self
        with np.errstate(invalid="ignore"):
            data = np.sqrt(a.data)

        def bw(g):
            a._accum(g * 0.5 / data)

        return Tensor._from_op(data, (a,), bw, "sqrt")

    def leaky_relu(self, slope: float = 0.2):
        a = self
        mask = a.data > 0
        data = np.where(mask, a.data, slope * a.data)

        def bw(g):
            a._accum(np.where(mask, g, slope * g))

        return Tensor._from_op(data, (a,), bw, "leaky_relu")

    def relu(self):
        return self.leaky_relu(0.0)

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * data)

        return Tensor._from_op(data, (a,), bw, "softmax")

    def tanh(self):
        a = self
        data = np.tanh(a.data)

        def bw(g):
            a._accum(g * (1.0 - data * data))

        return Tensor._from_op(data, (a,), bw, "tanh")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._from_op(data, parts, bw, "concat")


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into every reachable leaf's grad buffer.

    `loss` must be scalar. Leaves not reachable from `loss` keep whatever
    their grad buffer already holds (zeros right after creation/zero_grad).
    """
    if loss.data.size != 1:
        raise GradError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GradError("loss is not connected to any tensor with requires_grad")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def parameters_of(obj) -> Iterable[tuple[str, Tensor]]:
    """Yield (name, tensor) pairs from any object exposing .parameters()."""
    yield from obj.parameters()
