"""Dense float64 tensors with a reverse-mode tape.

Operations executed while a :class:`Graph` is active (``with Graph() as g:``)
are recorded on that graph whenever at least one input requires a gradient.
Outside a graph, or inside :func:`no_grad`, operations only compute values,
which is how inference runs.

Every reduction sums left to right along its axis (``np.add.accumulate``) and
``matmul`` accumulates its inner dimension in order, so results are
bit-identical to the naive loop and independent of BLAS threading.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - the numpy path below is the fallback
    numba = None

from .errors import DegenerateInputError, DimensionError, GraphError, NonFiniteError

NORM_EPS = 1e-12

_local = threading.local()


def _state():
    if not hasattr(_local, "graphs"):
        _local.graphs = []
        _local.scopes = []
        _local.counts = Counter()
    return _local


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_graph", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._graph: Graph | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._graph = None
        return t

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def assign(self, arr) -> None:
        """Replace the stored values in place of an optimizer update."""
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self.data.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("assigned values must be finite")
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Graph:
    """Ordered record of differentiable operations.

    A graph is consumed by :func:`backward`; call :meth:`reset` before
    recording the next step.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _state().graphs.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().graphs.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        if self.consumed:
            raise GraphError("graph was already used by backward(); call reset() first")
        out.requires_grad = True
        out._graph = self
        self._nodes.append((out, parents, fn))

    def reset(self) -> None:
        for out, _, _ in self._nodes:
            out._graph = None
        self._nodes.clear()
        self.consumed = False


@contextlib.contextmanager
def no_grad():
    st = _state()
    st.graphs.append(None)
    try:
        yield
    finally:
        st.graphs.pop()


@contextlib.contextmanager
def op_scope(name: str):
    """Attribute every operation executed inside the block to ``name``."""
    st = _state()
    st.scopes.append(name)
    try:
        yield
    finally:
        st.scopes.pop()


class OpCounter:
    """Counts operations per scope executed on this thread while active.

    >>> with OpCounter() as c:
    ...     ...
    >>> c["text"]
    """

    def __enter__(self) -> "OpCounter":
        self._start = Counter(_state().counts)
        self.counts: Counter = Counter()
        return self

    def __exit__(self, *exc) -> None:
        now = _state().counts
        self.counts = Counter({k: now[k] - self._start.get(k, 0) for k in now if now[k] != self._start.get(k, 0)})

    def __getitem__(self, scope: str) -> int:
        return self.counts.get(scope, 0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, arr: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    st = _state()
    st.counts["total"] += 1
    for scope in set(st.scopes):
        st.counts[scope] += 1
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(arr)
    graph = st.graphs[-1] if st.graphs else None
    if graph is not None and any(p.requires_grad for p in parents):
        graph._record(out, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else loss._graph
    if graph is None or loss._graph is not graph:
        raise GraphError("loss was not produced through this graph")
    if graph.consumed:
        raise GraphError("backward() already ran on this graph; call reset() first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(graph._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._graph is graph:
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
            else:
                p.grad = np.array(pg, dtype=np.float64) if p.grad is None else p.grad + pg
    graph.consumed = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def ordered_sum(x: np.ndarray, axis: int | None = None, keepdims: bool = False) -> np.ndarray:
    """Left-to-right sum along ``axis`` (all elements, row-major, when None)."""
    if axis is None:
        flat = x.reshape(-1)
        total = np.add.accumulate(flat)[-1] if flat.size else np.float64(0.0)
        return np.full((1,) * x.ndim, total) if keepdims else np.asarray(total)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        res = np.zeros(x.shape[:axis] + x.shape[axis + 1:])
    else:
        res = np.take(np.add.accumulate(x, axis=axis), n - 1, axis=axis)
    return np.expand_dims(res, axis) if keepdims else res


if numba is not None:

    @numba.njit(cache=True)
    def _matmul_kernel(a, b):
        # a: [Ba, M, K], b: [Bb, K, N] with Ba, Bb equal or 1. No fastmath: the
        # k-sum stays sequential and unfused, matching the naive triple loop.
        batch = max(a.shape[0], b.shape[0])
        m, k_dim = a.shape[1], a.shape[2]
        n = b.shape[2]
        out = np.zeros((batch, m, n))
        for bb in range(batch):
            ai = bb if a.shape[0] > 1 else 0
            bi = bb if b.shape[0] > 1 else 0
            for i in range(m):
                for k in range(k_dim):
                    aik = a[ai, i, k]
                    for j in range(n):
                        out[bb, i, j] += aik * b[bi, k, j]
        return out


def _as_batch3(x: np.ndarray, batch: tuple[int, ...]) -> np.ndarray:
    lead = x.shape[:-2]
    if int(np.prod(lead, dtype=np.int64)) == 1:
        return np.ascontiguousarray(x.reshape((1,) + x.shape[-2:]))
    if lead != batch:
        x = np.broadcast_to(x, batch + x.shape[-2:])
    return np.ascontiguousarray(x).reshape((-1,) + x.shape[-2:])


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product whose inner sum runs k = 0, 1, ..., K-1."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, k_dim, n = a.shape[-2], a.shape[-1], b.shape[-1]
    if k_dim == 0:
        return np.zeros(batch + (m, n))
    if numba is not None:
        out = _matmul_kernel(_as_batch3(a, batch), _as_batch3(b, batch))
        return out.reshape(batch + (m, n))
    out = a[..., :, 0:1] * b[..., 0:1, :]
    tmp = np.empty_like(out)
    for k in range(1, k_dim):
        np.multiply(a[..., :, k:k + 1], b[..., k:k + 1, :], out=tmp)
        out += tmp
    return np.broadcast_to(out, batch + (m, n)).copy()


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make("where", np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def matmul(a, b) -> Tensor:
    """``a @ b`` over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")

    def fn(g):
        ga = ordered_matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = ordered_matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make("matmul", ordered_matmul(a.data, b.data), (a, b), fn)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", ordered_sum(a.data, axis, keepdims), (a,), fn)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return div(sum(a, axis, keepdims), float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("getitem", a.data[idx], (a,), fn)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"row index out of range for table with {table.shape[0]} rows")

    def fn(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make("take_rows", table.data[ids], (table,), fn)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise DimensionError("softmax row with every position masked")
        masked = np.where(mask, x.data, -np.inf)
        shifted = masked - masked.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / ordered_sum(e, axis, keepdims=True)

    def fn(g):
        return (out * (g - ordered_sum(g * out, axis, keepdims=True)),)

    return _make("softmax", out, (x,), fn)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("logsumexp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = ordered_sum(e, axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def fn(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _make("logsumexp", out, (x,), fn)


def l2_normalize(x, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        norm = np.sqrt(ordered_sum(x.data * x.data, axis, keepdims=True))
    if not np.isfinite(norm).all():
        raise NonFiniteError("l2_normalize produced non-finite values (norm overflow)")
    if (norm <= eps).any():
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    out = x.data / norm

    def fn(g):
        return ((g - out * ordered_sum(g * out, axis, keepdims=True)) / norm,)

    return _make("l2_normalize", out, (x,), fn)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    The numeric gradient uses central differences with the given step.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    leaf = Tensor(x.data, requires_grad=True)
    with Graph() as graph:
        out = f(leaf)
    if out.data.size != 1:
        raise DimensionError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    if out._graph is graph:
        backward(out, graph)
    analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)

    base = np.array(x.data, dtype=np.float64).reshape(-1)
    numeric = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            probe = base.copy()
            probe[i] = base[i] + step
            fp = f(Tensor(probe.reshape(x.shape))).item()
            probe[i] = base[i] - step
            fm = f(Tensor(probe.reshape(x.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
