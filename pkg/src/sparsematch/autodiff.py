"""Minimal dense 2-D tensor engine with reverse-mode differentiation.

Every value is a row-major 2-D matrix.  A ``Tensor`` produced by an
operation remembers its parents and a backward rule, so a computation
graph is rebuilt on every forward pass (define-by-run); ``backward``
walks it once in reverse topological order.  Default precision is
float32; gradient-verification code switches to float64 via
``set_default_dtype``.

The op set is the minimal closure needed by the matching pipeline:
matmul, elementwise add/sub/mul, scalar scaling, column concatenation,
row gather, row softmax, sigmoid, relu, context normalization, log,
exp, clamp, row logsumexp, sum/mean, transpose, and row/column vector
broadcasts (bias addition and diagonal column reweighting).
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used by tensor factories (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype (used by 64-bit checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph construction; ops return detached value tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class AllocStats:
    """Tracks live/peak bytes held by tensor buffers (engine allocator metric).

    Deterministic across machines, unlike OS RSS.  CPython refcounting
    frees non-cyclic buffers promptly, so live/peak track actual usage.
    Disabled by default; the benchmark enables it around measured runs.
    """

    def __init__(self) -> None:
        self.enabled = False
        self.live = 0
        self.peak = 0
        self.total = 0

    def reset(self) -> None:
        self.live = 0
        self.peak = 0
        self.total = 0

    def _add(self, nbytes: int) -> None:
        self.live += nbytes
        self.total += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def _sub(self, nbytes: int) -> None:
        self.live -= nbytes


alloc_stats = AllocStats()


def _as_matrix(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype or _default_dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A 2-D matrix, optionally attached to the computation graph.

    A tensor created by an op doubles as the graph node: ``op`` names
    the operation, ``parents`` holds the input tensors and ``grad``
    is the gradient accumulator (zeroed at the start of each backward
    pass for non-leaf nodes).  Tensors with no parents and
    ``requires_grad=False`` are plain immutable values.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward_fn", "__weakref__")

    def __init__(self, data, *, requires_grad: bool = False, dtype=None,
                 op: str | None = None, parents: tuple = (), backward_fn=None):
        self.data = _as_matrix(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward_fn = backward_fn
        if alloc_stats.enabled:
            alloc_stats._add(self.data.nbytes)
            weakref.finalize(self, alloc_stats._sub, self.data.nbytes)

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(rows: int, cols: int, dtype=None) -> "Tensor":
        return Tensor(np.zeros((rows, cols), dtype=dtype or _default_dtype))

    @staticmethod
    def ones(rows: int, cols: int, dtype=None) -> "Tensor":
        return Tensor(np.ones((rows, cols), dtype=dtype or _default_dtype))

    @staticmethod
    def full(rows: int, cols: int, value: float, dtype=None) -> "Tensor":
        return Tensor(np.full((rows, cols), value, dtype=dtype or _default_dtype))

    # -- shape introspection -------------------------------------------------

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable tensor; its gradient persists across backward passes."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _make(data, op: str, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result, attaching graph info only when grad is live."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ, {a.shape} vs {b.shape}")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b a 1xN row broadcast over the rows of x (bias add)."""
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"add_rowvec: need 1x{x.cols} row, got {b.shape} for {x.shape}")
    return _make(x.data + b.data, "add_rowvec", (x, b),
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


def add_colvec(x: Tensor, u: Tensor) -> Tensor:
    """x + u with u an Mx1 column broadcast over the columns of x."""
    if u.cols != 1 or u.rows != x.rows:
        raise ShapeError(f"add_colvec: need {x.rows}x1 column, got {u.shape} for {x.shape}")
    return _make(x.data + u.data, "add_colvec", (x, u),
                 lambda g: (g, g.sum(axis=1, keepdims=True)))


def scale_columns(x: Tensor, w: Tensor) -> Tensor:
    """Multiply column j of x by w[0, j] (right-multiplication by Diag(w))."""
    if w.rows != 1 or w.cols != x.cols:
        raise ShapeError(f"scale_columns: need 1x{x.cols} row, got {w.shape} for {x.shape}")
    return _make(x.data * w.data, "scale_columns", (x, w),
                 lambda g: (g * w.data, (g * x.data).sum(axis=0, keepdims=True)))


def concat_cols(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat_cols: no inputs")
    rows = xs[0].rows
    for x in xs:
        if x.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ, {x.shape} vs {xs[0].shape}")
    widths = [x.cols for x in xs]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([x.data for x in xs], axis=1), "concat_cols", tuple(xs), bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Rows of x at the given indices, in index-list order."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise IndexError(f"gather_rows: index out of range for {x.rows} rows: {idx}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], "gather_rows", (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax_rows", (x,), bwd)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))), Mx1 output; stable via max subtraction."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = np.log(s) + m

    def bwd(g):
        return (g * (e / s),)

    return _make(out, "logsumexp_rows", (x,), bwd)


def logsumexp_cols(x: Tensor) -> Tensor:
    """Column-wise log(sum(exp(x))), 1xN output; stable via max subtraction."""
    m = x.data.max(axis=0, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=0, keepdims=True)
    out = np.log(s) + m

    def bwd(g):
        return (g * (e / s),)

    return _make(out, "logsumexp_cols", (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # exp of -|x| only, so large magnitudes cannot overflow.
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, "relu", (x,), lambda g: (g * (x.data > 0),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through unclamped entries."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data > lo
    if hi is not None:
        inside &= x.data < hi
    return _make(out, "clamp", (x,), lambda g: (g * inside,))


def context_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column to zero mean / unit variance across rows.

    Degenerate inputs (single row, constant column) map to zero columns
    because the centered values are zero regardless of the variance floor.
    """
    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = (x.data - mu) * inv_std

    def bwd(g):
        gm = g.mean(axis=0, keepdims=True)
        gy = (g * out).mean(axis=0, keepdims=True)
        return (inv_std * (g - gm - out * gy),)

    return _make(out, "context_normalize", (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    out = np.array([[x.data.sum()]], dtype=x.data.dtype)

    def bwd(g):
        return (np.full_like(x.data, g[0, 0]),)

    return _make(out, "sum", (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.array([[x.data.mean()]], dtype=x.data.dtype)

    def bwd(g):
        return (np.full_like(x.data, g[0, 0] / n),)

    return _make(out, "mean", (x,), bwd)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-first ordering of the subgraph reachable from root (iterative)."""
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dx into .grad for every reachable requires_grad tensor.

    Non-parameter node accumulators start from zero on each call;
    Parameter gradients accumulate across calls until zero_grad().
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return  # constant loss: nothing reachable, all gradients are zero
    order = _topo_order(loss)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        pgrads = node._backward_fn(node.grad)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                # copy: a closure may hand the same array to several parents
                parent.grad = np.array(pg, dtype=parent.data.dtype)
            else:
                parent.grad += pg.astype(parent.data.dtype, copy=False)


def find_first_nonfinite(root: Tensor) -> Tensor | None:
    """First graph node (parents-first order) holding a NaN/Inf value."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node
    return None
