"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation
records its parents and a backward rule on the output tensor, so the
graph is built implicitly during the forward pass and walked in reverse
topological order by :func:`backward`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_debug = False


class TensorError(ValueError):
    """Shape or value contract violated by a tensor operation."""


class NonFiniteError(FloatingPointError):
    pass


def set_debug(enabled: bool) -> None:
    """Enable NaN/Inf detection after every forward operation."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    # make ndarray <op> Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise TensorError(f"tensor shape must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Create the output of an operation.

        ``backward`` maps the output gradient to one gradient per parent
        (``None`` for parents that need none).
        """
        out = cls(data)
        if _debug and not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"non-finite value produced by {op}")
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out.op = op
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)
        return t

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and reduction primitives -----------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    return Tensor.from_op(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return Tensor.from_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), _bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(a.data[index]), (a,), _bw, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor.from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# -- graph traversal --------------------------------------------------------

class Graph:
    """Operation nodes reachable from an output, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _topological_order(output)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None and n.requires_grad]


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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = Graph(loss).nodes
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=node.dtype)
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt``; unreachable tensors get zeros."""
    wrt = list(wrt)
    saved = [t.grad for t in wrt]
    for t in wrt:
        t.grad = None
    try:
        backward(loss)
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]
    finally:
        for t, s in zip(wrt, saved):
            t.grad = s
