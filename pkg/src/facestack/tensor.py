"""Dense float64 tensor substrate with reverse-mode autodiff over a fixed op set.

Values are immutable; every op validates that its output is finite (NaN/Inf
anywhere is treated as an error state, not a value). The autodiff graph hangs
off the tensors produced during a forward pass and is consumed by a single
backward() call. Only row-vector and column-vector broadcasting are supported,
and only by the ops that document it.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where the op set guarantees finite values."""


class TapeError(RuntimeError):
    """Backward called on a detached, non-scalar, or already-consumed graph."""


class _Node:
    """One reverse-mode tape entry: op id, parent refs, saved-state closure."""

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Immutable dense array of float64 values, optionally on a tape.

    ``data`` is a read-only, row-major numpy array. Tensors are safe to share
    across threads; a graph of taped tensors belongs to exactly one
    forward/backward episode.
    """

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: _Node | None = None):
        data = np.asarray(data)  # 0-d arithmetic hands back numpy scalars
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        data.flags.writeable = False
        self.data = data
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = self.node.op if self.node is not None else "const"
        return f"Tensor(shape={tuple(self.shape)}, op={tag})"


def constant(values) -> Tensor:
    """Wrap values as an untaped tensor (no gradient will flow to it)."""
    arr = np.array(values, dtype=np.float64, order="C")
    return Tensor(arr)


def leaf(values) -> Tensor:
    """Wrap values as a trainable leaf; backward() reports its gradient."""
    arr = np.array(values, dtype=np.float64, order="C")
    return Tensor(arr, _Node("leaf", (), None))


def _result(op, out, parents, backward_fn):
    if any(p.node is not None for p in parents):
        return Tensor(out, _Node(op, parents, backward_fn))
    return Tensor(out)


def _as2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# broadcasting helpers (row / column vector only)

def _broadcast_kind(a_shape, b_shape, op):
    if a_shape == b_shape:
        return "same"
    if len(a_shape) == 2 and len(b_shape) == 2:
        if b_shape == (1, a_shape[1]):
            return "row"
        if b_shape == (a_shape[0], 1):
            return "col"
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not compatible "
                     "(equal shapes, or a [1 x n] row / [m x 1] column second operand)")


def _reduce_broadcast(g, kind):
    if kind == "row":
        return g.sum(axis=0, keepdims=True)
    if kind == "col":
        return g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# op set

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n]."""
    _as2d(a, "matmul")
    _as2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", out, (a, b), backward_fn)


def matmul_sorted(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product whose inner-axis accumulation is done in sorted order.

    Same math as matmul, but each output element sums its k products after
    sorting them, so the result depends only on the multiset of products and
    is bitwise invariant under any joint permutation of the inner axis. Used
    where attention must be exactly invariant to face-block reordering.
    """
    _as2d(a, "matmul_sorted")
    _as2d(b, "matmul_sorted")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul_sorted: inner extents differ, {a.shape} x {b.shape}")
    prods = a.data[:, :, None] * b.data[None, :, :]
    prods.sort(axis=1)
    out = prods.sum(axis=1)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul_sorted", out, (a, b), backward_fn)


def softmax_rows(x: Tensor, sorted_sum: bool = False) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability.

    With sorted_sum=True the denominator is accumulated in sorted order,
    making each row's normalizer invariant to permutations of that row.
    """
    _as2d(x, "softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if sorted_sum:
        denom = np.sort(e, axis=1).sum(axis=1, keepdims=True)
    else:
        denom = e.sum(axis=1, keepdims=True)
    out = e / denom

    def backward_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax_rows", out, (x,), backward_fn)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a [1 x n] row or [m x 1] column vector."""
    kind = _broadcast_kind(a.shape, b.shape, "hadamard")
    out = a.data * b.data

    def backward_fn(g):
        return g * b.data, _reduce_broadcast(g * a.data, kind)

    return _result("hadamard", out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a [1 x n] row or [m x 1] column vector."""
    kind = _broadcast_kind(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward_fn(g):
        return g, _reduce_broadcast(g, kind)

    return _result("add", out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference, equal shapes only."""
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data

    def backward_fn(g):
        return g, -g

    return _result("sub", out, (a, b), backward_fn)


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply every element by the scalar alpha."""
    alpha = float(alpha)
    out = x.data * alpha

    def backward_fn(g):
        return (g * alpha,)

    return _result("scale", out, (x,), backward_fn)


def silu(x: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit, x * sigmoid(x); the default nonlinearity."""
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward_fn(g):
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return _result("silu", out, (x,), backward_fn)


def pool_down(x: Tensor, mode: str = "mean") -> Tensor:
    """2x2 window reduction of an [h x w x c] grid; h and w must be even."""
    if x.data.ndim != 3:
        raise ShapeError(f"pool_down expects [h x w x c], got {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_down: extents must be even, got {h} x {w}")
    windows = x.data.reshape(h // 2, 2, w // 2, 2, c)
    if mode == "mean":
        out = windows.mean(axis=(1, 3))

        def backward_fn(g):
            gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
            return (gx,)

    elif mode == "max":
        flat = windows.transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
        arg = flat.argmax(axis=3)
        out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

        def backward_fn(g):
            gw = np.zeros((h // 2, w // 2, c, 4))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=3)
            gx = gw.reshape(h // 2, w // 2, c, 2, 2).transpose(0, 3, 1, 4, 2)
            return (gx.reshape(h, w, c),)

    else:
        raise ValueError(f"pool_down: unknown mode {mode!r}")
    return _result("pool_down", out, (x,), backward_fn)


def upsample_nearest(x: Tensor) -> Tensor:
    """Replicate each cell of an [h x w x c] grid into a 2x2 block."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_nearest expects [h x w x c], got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w, c = x.shape

    def backward_fn(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return _result("upsample_nearest", out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    """Row-major reshape."""
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    old = x.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _result("reshape", out, (x,), backward_fn)


def transpose(x: Tensor) -> Tensor:
    """2-D transpose."""
    _as2d(x, "transpose")
    out = np.ascontiguousarray(x.data.T)

    def backward_fn(g):
        return (np.ascontiguousarray(g.T),)

    return _result("transpose", out, (x,), backward_fn)


def concat_rows(tensors) -> Tensor:
    """Stack 2-D tensors along rows; column counts must match."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_rows: empty input")
    for t in tensors:
        _as2d(t, "concat_rows")
    cols = tensors[0].shape[1]
    if any(t.shape[1] != cols for t in tensors):
        raise ShapeError(f"concat_rows: column counts differ, "
                         f"{[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=0))

    return _result("concat_rows", out, tuple(tensors), backward_fn)


def concat_cols(tensors) -> Tensor:
    """Stack 2-D tensors along columns; row counts must match."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_cols: empty input")
    for t in tensors:
        _as2d(t, "concat_cols")
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeError(f"concat_cols: row counts differ, "
                         f"{[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return _result("concat_cols", out, tuple(tensors), backward_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor."""
    _as2d(x, "slice_rows")
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {x.shape}")
    out = x.data[start:stop]
    m = x.shape[0]

    def backward_fn(g):
        gx = np.zeros((m, g.shape[1]))
        gx[start:stop] = g
        return (gx,)

    return _result("slice_rows", out, (x,), backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    _as2d(x, "slice_cols")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for {x.shape}")
    out = x.data[:, start:stop]
    n = x.shape[1]

    def backward_fn(g):
        gx = np.zeros((g.shape[0], n))
        gx[:, start:stop] = g
        return (gx,)

    return _result("slice_cols", out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    out = np.asarray(x.data.sum())
    shp = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shp).copy(),)

    return _result("sum_all", out, (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    """Mean of all elements as a scalar tensor."""
    out = np.asarray(x.data.mean())
    shp, n = x.shape, x.size

    def backward_fn(g):
        return (np.broadcast_to(g / n, shp).copy(),)

    return _result("mean_all", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> dict:
    """Run reverse-mode differentiation from a scalar loss.

    Returns a map from each trainable leaf tensor reached by the graph to its
    gradient (a plain float64 array of the leaf's shape). The traversal visits
    every node exactly once and consumes the tape: a second backward through
    any part of the same graph raises TapeError.
    """
    if loss.node is None:
        raise TapeError("backward: loss is detached from any tape")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    # iterative postorder over the DAG, each tensor visited once
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        if t.node.consumed:
            raise TapeError("backward: tape already consumed")
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node.op == "leaf":
            leaf_grads[t] = leaf_grads.get(t, 0.0) + g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if p.node is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node.consumed = True
        node.backward_fn = None
        node.parents = ()
    return leaf_grads


def grad_check(f, x, h: float = 1e-6) -> float:
    """Compare backward() against central differences, coordinate by coordinate.

    f must be a deterministic function mapping one tensor to a scalar tensor.
    Returns max over coordinates of |analytic - numeric| divided by
    max(1, |analytic|, |numeric|).
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = leaf(base)
    y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got {y.shape}")
    if y.node is None:
        analytic = np.zeros_like(base)  # constant f: nothing reaches the tape
    else:
        analytic = backward(y).get(xt)
        if analytic is None:
            analytic = np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        hi = f(constant((flat + bump).reshape(base.shape))).item()
        lo = f(constant((flat - bump).reshape(base.shape))).item()
        numeric = (hi - lo) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
