"""Dense float tensors with tape-based reverse-mode differentiation.

Each operation that touches a tensor with ``requires_grad`` appends a node
to the thread's :class:`Tape`.  Nodes are only ever appended, so a node's
inputs always precede it and :func:`backward` simply walks the tape in
reverse.  The tape is reset after every backward pass.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()


def _st():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.dtype = np.dtype(np.float32)
        _local.debug = False
    return _local


def default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}; use float32 or float64")
    _st().dtype = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _st().dtype = old


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise on any non-finite value produced by an operation."""
    st = _st()
    old = st.debug
    st.debug = enabled
    try:
        yield
    finally:
        st.debug = old


class Node:
    __slots__ = ("index", "kind", "inputs", "backward_fn", "output", "generation")

    def __init__(self, index, kind, inputs, backward_fn, output, generation):
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.output = output
        self.generation = generation


class Tape:
    """Append-only record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def append(self, kind: str, inputs: tuple, backward_fn: Callable, output: "Tensor") -> Node:
        node = Node(len(self.nodes), kind, inputs, backward_fn, output, self.generation)
        self.nodes.append(node)
        return node

    def owns(self, node: Optional[Node]) -> bool:
        return (
            node is not None
            and node.generation == self.generation
            and node.index < len(self.nodes)
            and self.nodes[node.index] is node
        )

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


def get_tape() -> Tape:
    return _st().tape


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Images use N x C x H x W layout throughout; feature batches are N x F.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name", "decay")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if self.data.ndim > 0 and min(self.data.shape) == 0:
            raise ValueError(f"tensor extents must be positive, got shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._retain = False
        self.name = name
        self.decay = False

    # -- introspection -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        tape = get_tape()
        return self._node.index if tape.owns(self._node) else None

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic ----------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], kind: str, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record a tape node when any input needs a gradient.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    st = _st()
    out = Tensor(data, dtype=data.dtype)
    if st.debug and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{kind} produced non-finite values")
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = st.tape.append(kind, tuple(inputs), backward_fn, out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Leaf gradients accumulate across calls until cleared with ``zero_grad``.
    The tape is consumed: it is reset once the pass completes.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not tape.owns(loss._node):
        raise RuntimeError("loss is not on the current tape (no grad-tracked inputs, or tape already consumed)")
    grads: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
    for idx in range(loss._node.index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.output._retain:
            node.output.grad = g if node.output.grad is None else node.output.grad + g
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            elif tape.owns(t._node):
                j = t._node.index
                grads[j] = gi if j not in grads else grads[j] + gi
    tape.reset()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise and reduction ops ----------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make_result(a.data / b.data, (a, b), "div", bw)


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(a.data ** p, (a,), "pow", bw)


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), "exp", lambda g: (g * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where no clamping happened."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[x] for x in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def take_columns(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[i, index[i]]`` for each row of a 2-D tensor."""
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return make_result(a.data[rows, index], (a,), "take", bw)
