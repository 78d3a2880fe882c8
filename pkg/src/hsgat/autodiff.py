"""Dense 2-D tensors with reverse-mode automatic differentiation.

Everything is float64. A :class:`Tape` records operations in execution
order (which is a topological order of the computation graph); calling
:func:`backward` on a scalar result walks the tape once in reverse and
accumulates vector-Jacobian products into every tensor that requires a
gradient. Recording only happens inside a ``with Tape():`` block, so
evaluation-mode forwards are plain numpy arithmetic.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Invalid use of the differentiation tape."""


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are recorded. A tape can be consumed by
    :func:`backward` exactly once.
    """

    __slots__ = ("_entries", "_spent")

    def __init__(self):
        self._entries = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)


class _Node:
    __slots__ = ("inputs", "out", "vjp")

    def __init__(self, inputs, out, vjp):
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tensor:
    """A 2-D float64 array, optionally tracked on a differentiation tape."""

    __slots__ = ("values", "requires_grad", "tape", "_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.tape = None
        self._grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def grad(self):
        """Accumulated gradient; zeros for an untouched requires_grad tensor."""
        if self._grad is not None:
            return self._grad
        if self.requires_grad:
            return np.zeros_like(self.values)
        return None

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def backward(self) -> None:
        backward(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out_values: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    if tape._spent:
        raise TapeError("cannot record on a tape that was already consumed")
    for t in inputs:
        if t.tape is not None and t.tape is not tape:
            raise TapeError("operands were recorded on different tapes")
    out.requires_grad = True
    out.tape = tape
    tape._entries.append(_Node(inputs, out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every requires_grad tensor on the tape.

    Gradients add into any gradient already present on the leaves, so a
    training loop must call ``zero_grad`` between steps. A tape can only be
    walked once; build a fresh one per forward pass.
    """
    if loss.shape != (1, 1):
        raise TapeError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not connected to a tape (nothing was recorded)")
    if tape._spent:
        raise TapeError("backward was already called on this tape")
    tape._spent = True
    if loss._grad is None:
        loss._grad = np.ones((1, 1))
    for node in reversed(tape._entries):
        g = node.out._grad
        if g is None:
            continue
        for t, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not t.requires_grad:
                continue
            t._grad = ig if t._grad is None else t._grad + ig


# ---------------------------------------------------------------------------
# elementwise arithmetic with row/column broadcasting
# ---------------------------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _reduce_to(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    g = grad
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")

    def vjp(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.values + b.values, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")

    def vjp(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = -_reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.values - b.values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    av, bv = a.values, b.values

    def vjp(g):
        ga = _reduce_to(g * bv, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(av * bv, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    """Multiply by a plain python scalar."""
    x = _as_tensor(x)
    c = float(c)
    return _record(x.values * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _record(av @ bv, (a, b), vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    return _record(x.values.T.copy(), (x,), lambda g: (g.T,))


def concat_cols(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ: {a.shape} vs {b.shape}")
    na = a.shape[1]

    def vjp(g):
        ga = g[:, :na] if a.requires_grad else None
        gb = g[:, na:] if b.requires_grad else None
        return ga, gb

    return _record(np.concatenate([a.values, b.values], axis=1), (a, b), vjp)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.values)
        full[:, start:stop] = g
        return (full,)

    return _record(x.values[:, start:stop].copy(), (x,), vjp)


def gather_rows(x, idx) -> Tensor:
    """Select rows of ``x`` by index; duplicate indices are allowed."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.values[idx], (x,), vjp)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        return (np.full_like(x.values, g[0, 0]),)

    return _record(np.array([[x.values.sum()]]), (x,), vjp)


def row_sum(x) -> Tensor:
    """Sum along columns, returning an m-by-1 tensor."""
    x = _as_tensor(x)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(x.values.sum(axis=1, keepdims=True), (x,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    xv = x.values

    def vjp(g):
        return (g * np.where(xv > 0, 1.0, slope),)

    return _record(np.where(xv > 0, xv, slope * xv), (x,), vjp)


def elu(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.values
    out = np.where(xv > 0, xv, np.expm1(xv))

    def vjp(g):
        return (g * np.where(xv > 0, 1.0, np.exp(xv)),)

    return _record(out, (x,), vjp)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_values(x.values)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), vjp)


def log_sigmoid(x) -> Tensor:
    """Numerically stable log(sigmoid(x)), exact for large |x|."""
    x = _as_tensor(x)
    xv = x.values
    out = np.minimum(xv, 0.0) - np.log1p(np.exp(-np.abs(xv)))

    def vjp(g):
        return (g * _sigmoid_values(-xv),)

    return _record(out, (x,), vjp)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.values

    def vjp(g):
        return (g / xv,)

    return _record(np.log(xv), (x,), vjp)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.values)

    def vjp(g):
        return (g * out,)

    return _record(out, (x,), vjp)


def row_log_softmax(x) -> Tensor:
    """Per-row log-softmax with max-subtraction stabilization."""
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - logz
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _record(out, (x,), vjp)


def dropout(x, rate: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate).

    With ``training=False`` or ``rate=0`` this is the identity (the input
    tensor is returned unchanged).
    """
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def vjp(g):
        return (g * mask,)

    return _record(x.values * mask, (x,), vjp)


# ---------------------------------------------------------------------------
# segment operations (per-target-node reductions over a sorted edge list)
# ---------------------------------------------------------------------------


def _segment_starts(segment_ids: np.ndarray) -> np.ndarray:
    """Offsets of each run of equal ids; ids must be sorted ascending."""
    if segment_ids.size and np.any(np.diff(segment_ids) < 0):
        raise TapeError("segment_ids must be sorted ascending")
    return np.flatnonzero(np.r_[True, segment_ids[1:] != segment_ids[:-1]])


def segment_softmax(scores, segment_ids) -> Tensor:
    """Softmax over runs of equal segment ids.

    ``scores`` is E-by-1 and ``segment_ids`` a sorted length-E integer
    array; each run is normalized independently, with the per-run maximum
    subtracted before exponentiation.
    """
    scores = _as_tensor(scores)
    if scores.shape[1] != 1:
        raise ShapeError(f"segment_softmax expects an E-by-1 tensor, got {scores.shape}")
    ids = np.asarray(segment_ids, dtype=np.int64).ravel()
    if ids.size != scores.shape[0]:
        raise ShapeError(
            f"segment_softmax: {scores.shape[0]} scores but {ids.size} segment ids"
        )
    if ids.size == 0:
        return _record(scores.values.copy(), (scores,), lambda g: (g,))
    starts = _segment_starts(ids)
    lengths = np.diff(np.r_[starts, ids.size])
    vals = scores.values[:, 0]
    seg_max = np.repeat(np.maximum.reduceat(vals, starts), lengths)
    ex = np.exp(vals - seg_max)
    seg_sum = np.repeat(np.add.reduceat(ex, starts), lengths)
    out = (ex / seg_sum)[:, None]

    def vjp(g):
        gv = g[:, 0]
        alpha = out[:, 0]
        inner = np.repeat(np.add.reduceat(alpha * gv, starts), lengths)
        return ((alpha * (gv - inner))[:, None],)

    return _record(out, (scores,), vjp)


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets given by sorted ids."""
    values = _as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64).ravel()
    if ids.size != values.shape[0]:
        raise ShapeError(
            f"segment_sum: {values.shape[0]} rows but {ids.size} segment ids"
        )
    out = np.zeros((num_segments, values.shape[1]))
    if ids.size:
        starts = _segment_starts(ids)
        if ids[-1] >= num_segments or ids[0] < 0:
            raise ShapeError(
                f"segment_sum: ids span [{ids[0]}, {ids[-1]}] outside {num_segments} segments"
            )
        out[ids[starts]] = np.add.reduceat(values.values, starts, axis=0)

    def vjp(g):
        return (g[ids],)

    return _record(out, (values,), vjp)
