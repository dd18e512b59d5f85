"""Dense tensors with reverse-mode automatic differentiation.

Values live in contiguous numpy arrays; every differentiable operation records
its parents and a closure that pushes the output gradient back to them. Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order, visiting each node once.

Precision is fixed when a tensor is created: float64 is the default (gradient
checks need the headroom), float32 is used for training runs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float64


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.data
    # np.ascontiguousarray would promote 0-d values to shape (1,)
    arr = np.asarray(value, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return np.require(arr, requirements="C")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backward --------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = build_tape(self)
        # interior nodes get fresh accumulators per backward call
        for node in tape:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``root`` in topological order.

    Iterative DFS so deep graphs do not hit the recursion limit.
    """
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


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _backward
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = _backward
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    out = Tensor._result(a.data ** exponent, (a,), "pow")
    if out.requires_grad:
        def _backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))
        out._backward = _backward
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor._result(y, (a,), "exp")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * y)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor._result(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g / a.data)
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor._result(y, (a,), "sqrt")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * 0.5 / y)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor._result(s, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * s * (1.0 - s))
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = Tensor._result(a.data * s, (a,), "silu")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * s * (1.0 + a.data * (1.0 - s)))
    return out


# -- reductions and shape ---------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor._result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        axes = _normalize_axis(axis, a.ndim)

        def _backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backward = _backward
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor._result(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        def _backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g / count, a.shape))
        out._backward = _backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor._result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "transpose")
    if out.requires_grad:
        inverse = None if axes is None else tuple(np.argsort(axes))
        out._backward = lambda g: a._accumulate(np.transpose(g, inverse))
    return out


def getitem(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; backward scatters with ``np.add.at``."""
    out = Tensor._result(np.ascontiguousarray(a.data[index]), (a,), "getitem")
    if out.requires_grad:
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

        def _backward(g):
            full = np.zeros_like(a.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            a._accumulate(full)
        out._backward = _backward
    return out


def take_rows(a: Tensor, rows: np.ndarray, unique: bool = False) -> Tensor:
    """``a[rows]`` along the first axis; repeated rows accumulate in backward.

    Pass ``unique=True`` when ``rows`` has no repeats to use plain assignment.
    """
    rows = np.asarray(rows, dtype=np.int64)
    out = Tensor._result(a.data[rows], (a,), "take_rows")
    if out.requires_grad:
        def _backward(g):
            full = np.zeros_like(a.data)
            if unique:
                full[rows] = g
            else:
                np.add.at(full, rows, g)
            a._accumulate(full)
        out._backward = _backward
    return out


def index_add(n_rows: int, rows: np.ndarray, src: Tensor, unique: bool = False) -> Tensor:
    """Return a zero ``[n_rows, ...]`` tensor with ``src`` rows added at ``rows``."""
    rows = np.asarray(rows, dtype=np.int64)
    data = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    if unique:
        data[rows] = src.data
    else:
        np.add.at(data, rows, src.data)
    out = Tensor._result(data, (src,), "index_add")
    if out.requires_grad:
        out._backward = lambda g: src._accumulate(g[rows])
    return out


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` along the first axis."""
    out = Tensor._result(np.tile(a.data, (reps,) + (1,) * (a.ndim - 1)), (a,), "tile_rows")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.reshape((reps,) + a.shape).sum(axis=0))
    return out


def stack_sum(parts: Iterable[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, in the given order, as one graph node."""
    parts = list(parts)
    data = parts[0].data.copy()
    for p in parts[1:]:
        data += p.data
    out = Tensor._result(data, parts, "stack_sum")
    if out.requires_grad:
        def _backward(g):
            for p in parts:
                if p.requires_grad:
                    p._accumulate(g)
        out._backward = _backward
    return out


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes must match)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor._result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires_grad:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))
        out._backward = _backward
    return out


# -- probability ----------------------------------------------------------------------


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - np.max(z.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor._result(y, (z,), "softmax")
    if out.requires_grad:
        def _backward(g):
            z._accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)))
        out._backward = _backward
    return out


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - np.max(z.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor._result(y, (z,), "log_softmax")
    if out.requires_grad:
        def _backward(g):
            z._accumulate(g - np.exp(y) * np.sum(g, axis=axis, keepdims=True))
        out._backward = _backward
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` [T, V]."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy expects logits [T, V] and T targets, got {logits.shape} and {targets.shape}")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = targets[(targets < 0) | (targets >= v)][0]
        raise IndexError(f"target id {bad} outside vocabulary [0, {v})")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, targets]
    out = Tensor._result(np.asarray(nll.mean(), dtype=logits.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        def _backward(g):
            p = np.exp(shifted - lse[:, None])
            p[rows, targets] -= 1.0
            logits._accumulate(p * (g / n))
        out._backward = _backward
    return out


# -- composite layers ---------------------------------------------------------------------


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    if not (w_gate.shape == w_up.shape and x.shape[-1] == w_gate.shape[0] and w_down.shape == w_gate.shape[::-1]):
        raise DimensionError(
            f"swiglu_ffn shapes inconsistent: x {x.shape}, w_gate {w_gate.shape}, "
            f"w_up {w_up.shape}, w_down {w_down.shape}"
        )
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    ms = mean(x * x, axis=-1, keepdims=True)
    return x * power(ms + eps, -0.5) * weight


def check_finite_grads(tensors: Iterable[Tensor]) -> bool:
    return all(t.grad is None or np.all(np.isfinite(t.grad)) for t in tensors)


def global_grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.dot(t.grad.ravel().astype(np.float64), t.grad.ravel().astype(np.float64)))
    return math.sqrt(total)
