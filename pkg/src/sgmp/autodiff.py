"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.  The tape is
rebuilt on every forward pass.  Non-finite results raise immediately.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError, NumericError, RankError

_GRAD_ENABLED = contextvars.ContextVar("sgmp_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (forward-only evaluation)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """A float64 array plus an optional link into the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- views -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data buffer."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    # a finite sum implies finite entries; fall back to the full check on overflow
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    if a.shape != b.shape:
        raise DimensionError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data

    def bw(g):
        return np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


# -- nonlinearities -------------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make(y, (x,), lambda g: (g / x.data,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise RankError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis via log-sum-exp."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise RankError(f"log_softmax needs a non-empty last axis, got shape {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


# -- reductions and reshaping -----------------------------------------------

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    y = np.asarray(x.data.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(y, (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    y = np.asarray(x.data.sum() / n, dtype=np.float64)
    return _make(y, (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = x.data.reshape(shape)
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two vectors."""
    if a.ndim != 1 or b.ndim != 1:
        raise RankError(f"concat expects rank-1 tensors, got shapes {a.shape} and {b.shape}")
    p = a.shape[0]
    return _make(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:p], g[p:]), "concat")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two row batches along the feature axis: (N,p),(N,q) -> (N,p+q)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    p = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :p], g[:, p:]), "concat_cols")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    y = np.asarray(a.data @ b.data, dtype=np.float64)

    def bw(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        if b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _make(y, (a, b), bw, "matmul")


def matvec(m: Tensor, x: Tensor) -> Tensor:
    if m.ndim != 2 or x.ndim != 1 or m.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: matrix shape {m.shape} and vector shape {x.shape} do not conform")
    return matmul(m, x)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for a vector or a row batch ``x``."""
    if x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
        raise DimensionError(f"linear: input shape {x.shape} and weight shape {w.shape} do not conform")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if x.ndim == 1:
            grads = [g @ w.data, np.outer(g, x.data)]
            gb = g
        else:
            grads = [g @ w.data, g.T @ x.data]
            gb = g.sum(axis=0)
        if b is not None:
            grads.append(gb)
        return tuple(grads)

    return _make(y, parents, bw, "linear")


# -- indexing and segment reductions -----------------------------------------

def take(x: Tensor, idx) -> Tensor:
    """Gather rows ``x[idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "take")


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather individual entries ``x[rows[k], cols[k]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make(x.data[rows, cols], (x,), bw, "pick")


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets, in row order."""
    ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, ids, x.data)
    return _make(out, (x,), lambda g: (g[ids],), "segment_sum")


def segment_max(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Elementwise max of rows per bucket; empty buckets give zeros.

    Gradient goes to the first row (in row order) attaining the max.
    """
    ids = np.asarray(segment_ids, dtype=np.intp)
    rows, width = x.shape
    out = np.zeros((num_segments, width))
    winner = np.full((num_segments, width), -1, dtype=np.intp)
    if rows:
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
        present = sorted_ids[starts]
        out[present] = np.maximum.reduceat(x.data[order], starts, axis=0)
        row_idx = np.broadcast_to(np.arange(rows)[:, None], (rows, width))
        cand = np.where(x.data == out[ids], row_idx, rows)
        winner[present] = np.minimum.reduceat(cand[order], starts, axis=0)

    def bw(g):
        gx = np.zeros_like(x.data)
        seg, col = np.nonzero(winner >= 0)
        gx[winner[seg, col], col] += g[seg, col]
        return (gx,)

    return _make(out, (x,), bw, "segment_max")


# -- backward pass ------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients add onto whatever is already stored; callers zero them.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = np.array(pg, dtype=np.float64) if prev is None else prev + pg


# -- finite-difference checking -------------------------------------------------

def named_tensors(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "named_tensors"):
        return list(params.named_tensors())
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param{i}", t) for i, t in enumerate(params)]


def grad_check_report(f: Callable, params, eps: float = 1e-5) -> tuple[float, str, int]:
    """Compare analytic gradients of ``f(params)`` with central differences.

    Returns ``(max_rel_error, worst_name, worst_flat_index)``.  The error for
    one entry is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = named_tensors(params)
    for _, t in named:
        t.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise EvaluationError("objective is not finite")
    backward(loss)

    def evaluate() -> float:
        with no_grad():
            val = f(params)
        v = float(np.asarray(val.data if isinstance(val, Tensor) else val).reshape(-1)[0])
        if not np.isfinite(v):
            raise EvaluationError("objective is not finite under perturbation")
        return v

    worst, worst_name, worst_idx = 0.0, "", -1
    for name, t in named:
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = evaluate()
            flat[k] = orig - eps
            down = evaluate()
            flat[k] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[k]
            err = np.abs(a - numeric) / max(1.0, np.abs(a), np.abs(numeric))
            if err > worst or worst_idx < 0:
                worst, worst_name, worst_idx = float(err), name, k
    return worst, worst_name, worst_idx


def grad_check(f: Callable, params, eps: float = 1e-5) -> float:
    return grad_check_report(f, params, eps)[0]


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
