"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation the model, projection blocks, and losses need is defined
here with a hand-derived backward rule. Conventions:

- 64-bit precision by default; 32-bit is opt-in via the ``dtype`` argument
  at tensor-creation time.
- No implicit broadcasting except (a) python scalars, (b) a size-1 tensor
  against anything, and (c) a tensor whose shape equals the trailing shape
  of the other operand (leading-batch broadcast). Anything else requires an
  explicit reshape or a dedicated op such as ``scale_rows``.
- Softmax-family ops subtract the row max for stability.
- ``backward`` accumulates into ``.grad`` until grads are explicitly zeroed,
  and visits each graph node exactly once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense real array participating in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], list] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; all route through the module-level ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("use scale or explicit reciprocal for tensor division")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the subgraph requiring grad."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every reachable tensor.

    Grads add up across calls; use ``zero_grads`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in node._vjp(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1:
        return "scalar"
    if b.ndim < a.ndim and b.shape == a.shape[a.ndim - b.ndim :]:
        return "trailing"
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, target_shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum()).reshape(target_shape)
    lead = tuple(range(g.ndim - len(target_shape)))
    return g.sum(axis=lead)


def add(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    kind = _broadcast_kind(a, b)
    bdat = b.data.reshape(()) if kind == "scalar" else b.data

    def vjp(g):
        return [(a, g), (b, _reduce_to(g, kind, b.shape))]

    return _result(a.data + bdat, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    kind = _broadcast_kind(a, b)
    bdat = b.data.reshape(()) if kind == "scalar" else b.data

    def vjp(g):
        return [(a, g), (b, -_reduce_to(g, kind, b.shape))]

    return _result(a.data - bdat, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: [(a, -g)])


def mul(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    kind = _broadcast_kind(a, b)
    bdat = b.data.reshape(()) if kind == "scalar" else b.data

    def vjp(g):
        return [(a, g * bdat), (b, _reduce_to(g * a.data, kind, b.shape))]

    return _result(a.data * bdat, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors or two batch-matched 3-D tensors."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

        def vjp(g):
            return [(a, g @ b.data.T), (b, a.data.T @ g)]

        return _result(a.data @ b.data, (a, b), vjp)
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"batched matmul shapes differ: {a.shape} x {b.shape}")

        def vjp(g):
            return [
                (a, g @ b.data.transpose(0, 2, 1)),
                (b, a.data.transpose(0, 2, 1) @ g),
            ]

        return _result(a.data @ b.data, (a, b), vjp)
    raise DimensionError(f"matmul supports 2-D or batch-matched 3-D operands, got {a.shape} x {b.shape}")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise DimensionError(f"default transpose expects 2-D, got shape {a.shape}")
        axes = (1, 0)
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return _result(a.data.transpose(axes), (a,), lambda g: [(a, g.transpose(inv))])


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: [(a, g.reshape(old))])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: [(a, g * mask)])


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result(y, (a,), lambda g: [(a, g * y * (1.0 - y))])


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: [(a, g * y)])


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: [(a, g / a.data)])


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).copy())]

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; gradient routes to the first argmax (deterministic)."""
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx, np.expand_dims(g, axis), axis)
        return [(a, buf)]

    return _result(a.data.max(axis=axis), (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return [(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]

    return _result(y, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return [(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))]

    return _result(y, (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. No learned affine."""
    d = a.shape[-1] if a.ndim else 0
    if d == 0:
        raise DimensionError(f"layer_norm over empty last axis, shape {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return [(a, inv * (g - gm - y * gy))]

    return _result(y, (a,), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows ``a[idx]`` along the first axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return [(a, buf)]

    return _result(a.data[idx], (a,), vjp)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Select entries ``a[rows[i], cols[i]]`` from a 2-D tensor."""
    if a.ndim != 2:
        raise DimensionError(f"pick expects a 2-D tensor, got shape {a.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, cols), g)
        return [(a, buf)]

    return _result(a.data[rows, cols], (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis."""
    if not parts:
        raise DimensionError("concat_rows needs at least one tensor")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return [(p, g[offsets[i] : offsets[i + 1]]) for i, p in enumerate(parts)]

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D vector."""
    for p in parts:
        if p.data.size != 1:
            raise DimensionError(f"stack_scalars expects scalars, got shape {p.shape}")

    def vjp(g):
        return [(p, np.asarray(g[i]).reshape(p.shape)) for i, p in enumerate(parts)]

    return _result(np.array([float(p.data) for p in parts], dtype=parts[0].dtype), tuple(parts), vjp)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of ``a`` [n, d] by the per-row scalar ``s`` [n, 1] or [n]."""
    if a.ndim != 2:
        raise DimensionError(f"scale_rows expects 2-D input, got shape {a.shape}")
    svec = s.data.reshape(-1, 1)
    if svec.shape[0] != a.shape[0]:
        raise DimensionError(f"scale_rows: {a.shape} rows vs {s.shape} scales")

    def vjp(g):
        return [(a, g * svec), (s, (g * a.data).sum(axis=1).reshape(s.shape))]

    return _result(a.data * svec, (a, s), vjp)


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the scalar tensor ``s`` (keeps grad to both)."""
    if s.data.size != 1:
        raise DimensionError(f"scale expects a scalar multiplier, got shape {s.shape}")
    sval = s.data.reshape(())

    def vjp(g):
        return [(a, g * sval), (s, np.asarray((g * a.data).sum()).reshape(s.shape))]

    return _result(a.data * sval, (a, s), vjp)
