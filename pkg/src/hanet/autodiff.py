"""Dense tensors with a reverse-mode gradient tape.

Tensors are immutable wrappers around numpy arrays. A tensor becomes
differentiable by being watched on a :class:`Tape`; every op whose inputs
include a watched tensor records a node on that tape, and :func:`backward`
sweeps the nodes in reverse append order. Ops on untracked inputs record
nothing, so inference is tape-free by construction.

Example::

    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    loss = total(x * x)
    grads = backward(tape, loss)
    grads[x]            # Tensor([2., 4.])
"""
from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Mapping, Sequence
from typing import Any

import numpy as np

_DEFAULT_DTYPE = np.float32

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily change the dtype used for newly constructed tensors."""
    global _DEFAULT_DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """Immutable n-dimensional float array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: Any, dtype: Any = None, *, _tape: Tape | None = None,
                 _node: int | None = None, _owned: bool = False):
        if _owned and type(data) is np.ndarray:
            # fresh op output: already the right dtype and never aliased by a caller
            if 0 in data.shape:
                raise ShapeError(f"tensor extents must be positive, got {data.shape}")
            data.flags.writeable = False
            self.data, self.tape, self.node_id = data, _tape, _node
            return
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if arr.flags.writeable and not _owned and isinstance(data, np.ndarray) \
                and np.may_share_memory(arr, data):
            arr = arr.copy()  # never freeze the caller's array
        arr.flags.writeable = False
        self.data = arr
        self.tape = _tape
        self.node_id = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        tracked = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor({self.data!r}{tracked})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "vjp", "shape", "dtype")

    def __init__(self, parents: tuple[int, ...], vjp: Callable | None, shape, dtype):
        self.parents = parents
        self.vjp = vjp
        self.shape = shape
        self.dtype = dtype


class Tape:
    """Append-only record of differentiable ops.

    Node ids are append positions, so every parent id is smaller than its
    child's id and reverse append order is a valid reverse topological order.
    A tape must only be used from one thread.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Return a leaf copy of ``t`` whose gradient this tape will track."""
        node = len(self.nodes)
        self.nodes.append(_Node((), None, t.shape, t.dtype))
        return Tensor(t.data, _tape=self, _node=node)

    def _record(self, out: np.ndarray, parents: tuple[int, ...], vjp: Callable) -> Tensor:
        node = len(self.nodes)
        self.nodes.append(_Node(parents, vjp, out.shape, out.dtype))
        return Tensor(out, _tape=self, _node=node, _owned=True)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return out


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a forward result and record it if any input is tracked.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    _finite(out, op)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: operands are tracked by different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out, _owned=True)
    tracked = tuple(i for i, t in enumerate(inputs) if t.tape is not None)
    parents = tuple(inputs[i].node_id for i in tracked)
    if len(tracked) == len(inputs):
        return tape._record(out, parents, vjp)

    def partial_vjp(g: np.ndarray) -> tuple:
        grads = vjp(g)
        return tuple(grads[i] for i in tracked)

    return tape._record(out, parents, partial_vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# local derivatives, kept at module level so tests can substitute them

def _tanh_local(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def _sigmoid_local(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either operand may be a vector (but not both)."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.data.ndim + b.data.ndim < 3 \
            or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B
    if A.ndim == 2 and B.ndim == 2:
        def vjp(g):
            return g @ B.T, A.T @ g
    elif B.ndim == 1:
        def vjp(g):
            return np.outer(g, B), A.T @ g
    else:
        def vjp(g):
            return B @ g, np.outer(A, g)
    return _emit("matmul", out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def add_rows(x: Tensor, b: Tensor) -> Tensor:
    """Add the vector ``b`` to every row of the matrix ``x``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rows: cannot add {b.shape} to rows of {x.shape}")
    return _emit("add_rows", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * _tanh_local(y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", y, (a,), lambda g: (g * _sigmoid_local(y),))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs clamped from below at ``floor``."""
    x = a.data
    clamped = np.maximum(x, floor)
    live = x > floor
    return _emit("log", np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    x = a.data
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax expects a vector or matrix, got shape {a.shape}")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def take(a: Tensor, index: Any) -> Tensor:
    """Index with ints, slices or integer arrays (numpy semantics)."""
    out = a.data[index]
    if out.size == 0:
        raise ShapeError(f"take: index {index!r} selects nothing from shape {a.shape}")
    shape, dtype = a.shape, a.dtype
    fancy = isinstance(index, (np.ndarray, list)) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index))

    def vjp(g):
        grad = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(grad, index, g)
        else:
            grad[index] = g
        return (grad,)

    return _emit("take", np.array(out), (a,), vjp)


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not items:
        raise ShapeError("stack: empty list")
    first = items[0].shape
    for t in items:
        if t.shape != first:
            raise ShapeError(f"stack: shape mismatch {first} vs {t.shape}")
    out = np.stack([t.data for t in items])
    return _emit("stack", out, tuple(items), lambda g: tuple(g))


def concat(items: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    if not items:
        raise ShapeError("concat: empty list")
    out = np.concatenate([t.data for t in items])
    bounds = np.cumsum([0] + [t.shape[0] for t in items])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(items)))

    return _emit("concat", out, tuple(items), vjp)


def zeros(shape: int | tuple[int, ...], dtype: Any = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))


def elementwise(op: str, *args: Any) -> Tensor:
    """Dispatch by name: add, sub, mul, tanh, sigmoid, scale."""
    table: dict[str, Callable[..., Tensor]] = {
        "add": add, "sub": sub, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "scale": scale,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


class Gradients(Mapping):
    """Gradient per tape node; unreached nodes read as zeros."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def _id(self, key: Any) -> int:
        if isinstance(key, Tensor):
            if key.tape is not self._tape:
                raise KeyError("tensor is not tracked by this tape")
            return key.node_id
        return int(key)

    def array(self, key: Any) -> np.ndarray:
        i = self._id(key)
        g = self._grads[i]
        if g is None:
            node = self._tape.nodes[i]
            return np.zeros(node.shape, dtype=node.dtype)
        return g

    def __getitem__(self, key: Any) -> Tensor:
        return Tensor(self.array(key))

    def __iter__(self) -> Iterator[int]:
        return iter(range(len(self._grads)))

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Accumulate d(root)/d(node) for every node on ``tape``."""
    if root.tape is not tape:
        raise ValueError("backward: root is not recorded on this tape")
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[root.node_id] = np.ones(root.shape, dtype=root.dtype)
    for i in range(root.node_id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = np.array(pg, dtype=nodes[parent].dtype).reshape(nodes[parent].shape)
            else:
                grads[parent] = grads[parent] + pg
    return Gradients(tape, grads)
