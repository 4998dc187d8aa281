"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array of rank 1 to 4.  Every
differentiable operation that touches a tensor with ``requires_grad`` set
creates a :class:`Node` holding its inputs and a backward rule.  Calling
:func:`backward` on a scalar loss linearises the reachable nodes into a
:class:`Tape` (topological order) and replays the rules in reverse.

Gradient contract: leaf gradients accumulate.  Running ``backward`` twice on
the same graph without :meth:`Tensor.zero_grad` doubles every leaf gradient.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32
MAX_RANK = 4

_node_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return None if self._node is None else self._node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1,) * like.ndim, value, dtype=like.dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when gradients are needed.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    input (``None`` for inputs that receive nothing).
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


@dataclass(frozen=True)
class TapeRecord:
    node_id: int
    op: str
    input_ids: tuple
    backward_fn: Callable


class Tape:
    """Operations reachable from a tensor, in topological (recording) order."""

    def __init__(self, tensors: list):
        self.tensors = tensors

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    @property
    def records(self) -> list:
        out = []
        for t in self.tensors:
            n = t._node
            out.append(TapeRecord(n.id, n.op, tuple(i.node_id for i in n.inputs), n.backward_fn))
        return out

    def __len__(self):
        return len(self.tensors)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.shape != (1,):
        raise ContractError(f"backward needs a scalar loss of shape [1], got {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        _accumulate_leaf(loss, seed)
        return
    tape = Tape.trace(loss)
    pending = {id(loss): seed}
    for t in reversed(tape.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        in_grads = t._node.backward_fn(g)
        for inp, gi in zip(t._node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, gi)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


def tensor_create(shape, fill=0.0, *, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    """Create a tensor of ``shape``.

    ``fill`` is either a constant or ``("uniform", a, seed)`` for seeded
    uniform values in ``[-a, a]``.
    """
    shape = tuple(int(d) for d in shape)
    if not shape or len(shape) > MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {list(shape)}")
    if isinstance(fill, tuple):
        kind, a, seed = fill
        if kind != "uniform":
            raise ContractError(f"unknown fill kind {kind!r}")
        rng = np.random.default_rng(seed)
        data = rng.uniform(-a, a, size=shape).astype(dtype)
    else:
        data = np.full(shape, fill, dtype=dtype)
    return Tensor(data, requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim or any(bs not in (1, as_) for as_, bs in zip(a.shape, b.shape)):
        raise ShapeError(f"cannot broadcast {list(b.shape)} onto {list(a.shape)}")


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """``a (+|-|*) b`` where ``b`` matches ``a`` or broadcasts over size-1 axes."""
    _check_broadcast(a, b)
    if kind == "add":
        data = a.data + b.data

        def back(g):
            return g, _unbroadcast(g, b.shape)
    elif kind == "sub":
        data = a.data - b.data

        def back(g):
            return g, -_unbroadcast(g, b.shape)
    elif kind == "mul":
        data = a.data * b.data

        def back(g):
            return g * b.data, _unbroadcast(g * a.data, b.shape)
    else:
        raise ContractError(f"unknown elementwise op {kind!r}")
    return make_result(data, (a, b), back, kind)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes of ``a`` and ``b`` must agree, or ``b`` may be a plain 2-D
    matrix shared across them.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    data = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result(data, (a, b), back, "matmul")


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1)
    return make_result(data, (x,), lambda g: (np.broadcast_to(g.reshape((1,) * x.ndim), x.shape),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1)
    return make_result(
        data, (x,), lambda g: (np.broadcast_to(g.reshape((1,) * x.ndim) / n, x.shape),), "mean"
    )


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {list(axes)} are not a permutation of {x.ndim} dims")
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(data, (x,), lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"cannot concatenate {list(t.shape)} with {list(ref)} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(data, tuple(tensors), back, "concat")


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, indices=None) -> float:
    """Compare autodiff against central differences for scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored, so ``f`` may also close over it
    (e.g. when ``x`` is a model parameter).  Returns
    ``max_i |auto_i - fd_i| / max(1, |fd_i|)``, optionally only over the flat
    coordinates in ``indices``.
    """
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad, x.grad = True, None
    try:
        loss = f(x)
        backward(loss)
        auto = x.grad.reshape(-1).astype(np.float64).copy()
        flat = x.data.reshape(-1)
        idx = range(flat.size) if indices is None else indices
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(x).data.astype(np.float64).sum()
                flat[i] = orig - eps
                lo = f(x).data.astype(np.float64).sum()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                worst = max(worst, abs(auto[i] - fd) / max(1.0, abs(fd)))
        return worst
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad
