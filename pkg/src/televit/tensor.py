"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set covers exactly what a small transformer needs: matmul with an
optional leading batch dimension, elementwise arithmetic, softmax and
log-softmax, layer normalization, GELU, reductions, reshape, transpose,
slicing, and concatenation.

Graphs are built eagerly: every op attaches its parents and a closure that
maps the output gradient to parent gradients. ``backward`` on a scalar root
walks the graph once, in reverse topological order, accumulating gradients
additively across fan-out.

Broadcasting is deliberately restricted: two operands must either have
identical shapes or the smaller shape must equal the trailing axes of the
larger one (which covers biases, positional tables, and a leading batch
dimension). This keeps every gradient rule auditable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import GraphError, NumericsError, ShapeError

Array = np.ndarray
TensorLike = Union["Tensor", Array, float, int]

# GELU tanh-approximation constants.
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense float64 array with an optional gradient.

    Tensors produced by ops remember their parents and a vector-Jacobian
    closure; calling :func:`backward` on a scalar root fills ``grad`` for
    every reachable tensor with ``requires_grad=True``. Leaf tensors are the
    usual parameter carriers; constants (``requires_grad=False`` and no
    parents) are pruned from the graph automatically.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data: TensorLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.op: Optional[str] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[Array], tuple[Array, ...]]] = None

    # ------------------------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"

    # Operator sugar; canonical implementations are the module functions.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suppress graph construction inside the block (inference-only math)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _result(op: str, data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Assemble an op output, validating finiteness and pruning dead graph."""
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._vjp = vjp
    return out


def _check_elementwise(a: Array, b: Array, op: str) -> None:
    if a.shape == b.shape:
        return
    small, large = (a, b) if a.ndim < b.ndim else (b, a)
    if small.shape != large.shape[large.ndim - small.ndim :]:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are neither equal nor "
            "leading-broadcastable (smaller shape must match trailing axes)"
        )


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a.data, b.data, "add")
    data = a.data + b.data

    def vjp(g):
        return (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(g, b.shape) if b.requires_grad else None,
        )

    return _result("add", data, (a, b), vjp)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a.data, b.data, "sub")
    data = a.data - b.data

    def vjp(g):
        return (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(-g, b.shape) if b.requires_grad else None,
        )

    return _result("sub", data, (a, b), vjp)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a.data, b.data, "mul")
    data = a.data * b.data

    def vjp(g):
        return (
            _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
            _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result("mul", data, (a, b), vjp)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a.data, b.data, "div")
    data = a.data / b.data

    def vjp(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _reduce_to(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _result("div", data, (a, b), vjp)


def neg(a: TensorLike) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (-g,)

    return _result("neg", -a.data, (a,), vjp)


def power(a: TensorLike, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    data = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result("pow", data, (a,), vjp)


def exp(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _result("exp", data, (a,), vjp)


def log(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _result("log", data, (a,), vjp)


def tanh(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _result("tanh", data, (a,), vjp)


def gelu(a: TensorLike) -> Tensor:
    """GELU in the tanh-approximation form (constants 0.044715, sqrt(2/pi))."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    data = 0.5 * x * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)

    return _result("gelu", data, (a,), vjp)


# ----------------------------------------------------------------------
# Linear algebra and structure
# ----------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product. Leading batch axes are allowed on either operand
    (or both, if identical); gradients are summed back over broadcast axes.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim > 2 and b.ndim > 2:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = (
            _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if a.requires_grad
            else None
        )
        gb = (
            _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _result("matmul", data, (a, b), vjp)


def reshape(a: TensorLike, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _result("reshape", data, (a,), vjp)


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _result("transpose", data, (a,), vjp)


def getitem(a: TensorLike, idx) -> Tensor:
    """Basic (slice / integer / ellipsis) indexing with scatter backward.

    Basic indexing never aliases, so the backward writes the gradient into
    a zero buffer directly.
    """
    a = _wrap(a)
    data = np.array(a.data[idx])

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return _result("getitem", data, (a,), vjp)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = tuple(_wrap(t) for t in tensors)
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result("concat", data, parts, vjp)


def tile_leading(a: TensorLike, n: int) -> Tensor:
    """Repeat a tensor n times along a new leading axis; backward sums."""
    a = _wrap(a)
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def vjp(g):
        return (g.sum(axis=0),)

    return _result("tile_leading", data, (a,), vjp)


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------

def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _result("sum", data, (a,), vjp)


def tensor_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if data.size == 0 else a.data.size // max(data.size, 1)

    def vjp(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _result("mean", data, (a,), vjp)


def dot(a: TensorLike, b: TensorLike) -> Tensor:
    """Inner product of two same-shape tensors, as a scalar tensor."""
    return tensor_sum(mul(a, b))


# ----------------------------------------------------------------------
# Neural-network primitives
# ----------------------------------------------------------------------

def _check_axis(shape: tuple[int, ...], axis: int, op: str) -> int:
    if not -len(shape) <= axis < len(shape):
        raise ShapeError(f"{op}: axis {axis} invalid for shape {shape}")
    axis %= len(shape)
    if shape[axis] == 0:
        raise ShapeError(f"{op}: empty axis {axis} for shape {shape}")
    return axis


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along one axis."""
    a = _wrap(a)
    axis = _check_axis(a.shape, axis, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _result("softmax", s, (a,), vjp)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = _wrap(a)
    axis = _check_axis(a.shape, axis, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", data, (a,), vjp)


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({dim},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        if not x.requires_grad:
            return None, dgamma, dbeta
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result("layer_norm", data, (x, gamma, beta), vjp)


# ----------------------------------------------------------------------
# Backward pass
# ----------------------------------------------------------------------

@dataclass
class GraphNode:
    """One op record of a computation graph, in topological order."""

    node_id: int
    op: Optional[str]
    input_ids: tuple[int, ...]
    tensor: "Tensor"


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def computation_graph(root: Tensor) -> list[GraphNode]:
    """Materialize the graph under ``root`` as ordered op records.

    Every node's inputs precede it in the returned list, and each node
    appears exactly once.
    """
    order = _topo_order(root)
    return [
        GraphNode(node_id=id(t), op=t.op, input_ids=tuple(id(p) for p in t._parents), tensor=t)
        for t in order
    ]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every reachable leaf.

    The root must be a scalar (shape ``()``). Gradients add across fan-out
    and across repeated ``backward`` calls; call ``zero_grad`` in between
    if accumulation is not wanted.
    """
    if root.shape != ():
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    grads: dict[int, Array] = {id(root): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._vjp is None:
            # Leaf: expose the accumulated gradient.
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
