"""Dense tensors with define-by-run reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (row-major storage) plus an optional
gradient buffer. Every differentiable operation stores its input tensors and
a backward rule on the output, so each forward pass rebuilds the graph from
scratch. ``backward`` linearizes the graph into a tape in which every node
appears after all of its inputs, then replays the tape once in reverse,
accumulating gradients additively so a tensor used on several paths receives
the sum of the per-path gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "backward",
    "linearize",
    "zero_grads",
    "add",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "roll",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference, FD probes)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Optional[Callable] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- arithmetic dunders ------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _scalar_shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, _negate(other))
        return _scalar_shift(self, -other)

    def __rsub__(self, other):
        return _scalar_shift(_negate(self), other)

    def __neg__(self):
        return _negate(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _scalar_scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, _reciprocal(other))
        return _scalar_scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return _scalar_scale(_reciprocal(self), other)

    def __pow__(self, exponent):
        return _power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        src = self.data
        out = np.asarray(src[idx])

        def rule(g):
            full = np.zeros_like(src)
            np.add.at(full, idx, g)
            return (full,)

        return _from_op(out, (self,), rule)

    # -- shape / reduction methods -----------------------------------------

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return _exp(self)

    def log(self) -> "Tensor":
        return _log(self)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast dimensions back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _from_op(data, (a, b), rule)


def _scalar_shift(a: Tensor, c) -> Tensor:
    def rule(g):
        return (g,)

    return _from_op(a.data + c, (a,), rule)


def _scalar_scale(a: Tensor, c) -> Tensor:
    def rule(g):
        return (g * c,)

    return _from_op(a.data * c, (a,), rule)


def _negate(a: Tensor) -> Tensor:
    def rule(g):
        return (-g,)

    return _from_op(-a.data, (a,), rule)


def _reciprocal(a: Tensor) -> Tensor:
    data = 1.0 / a.data

    def rule(g):
        return (-g * data * data,)

    return _from_op(data, (a,), rule)


def _power(a: Tensor, p) -> Tensor:
    data = a.data ** p

    def rule(g):
        return (g * p * a.data ** (p - 1),)

    return _from_op(data, (a,), rule)


def _exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def rule(g):
        return (g * data,)

    return _from_op(data, (a,), rule)


def _log(a: Tensor) -> Tensor:
    def rule(g):
        return (g / a.data,)

    return _from_op(np.log(a.data), (a,), rule)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _from_op(data, (a, b), rule)


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from exc

    def rule(g):
        return (g.reshape(a.data.shape),)

    return _from_op(data, (a,), rule)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _from_op(np.transpose(a.data, axes), (a,), rule)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def rule(g):
        return (_unbroadcast(g, a.data.shape),)

    return _from_op(data, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _from_op(data, tensors, rule)


def roll(a: Tensor, shift, axis) -> Tensor:
    data = np.roll(a.data, shift, axis=axis)
    if isinstance(shift, tuple):
        unshift = tuple(-s for s in shift)
    else:
        unshift = -shift

    def rule(g):
        return (np.roll(g, unshift, axis=axis),)

    return _from_op(data, (a,), rule)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(shape) for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims).copy(),)

    return _from_op(data, (a,), rule)


def _mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size if data.size else 1

    def rule(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / count,)

    return _from_op(data, (a,), rule)


# -- the tape -----------------------------------------------------------------


def linearize(root: Tensor) -> list[Tensor]:
    """Forward-ordered tape of the graph below ``root``.

    Every node appears exactly once and strictly after all of its parents,
    so iterating the list in reverse visits each op once with all consumer
    gradients already accumulated.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into any pre-existing ``grad`` buffers; callers that
    want fresh gradients should ``zero_grads`` their parameters first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = linearize(loss)
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_rule is None:
            continue
        parent_grads = node._backward_rule(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
