"""Dense float64 arrays with reverse-mode differentiation on an explicit tape.

Every value flowing through the kernel, the forecaster, and the training
loop is an :class:`Array`.  Operations are pure: they never mutate their
inputs and return fresh arrays.  When any input is registered on a
:class:`Tape`, the operation appends one node (operation kind, input
handles, saved values) to that tape; ``Tape.backward`` then replays the
node list in reverse append order, which is a reverse topological order
because nodes are only ever appended after their inputs exist.

Numeric storage is a raw ``numpy`` float64 ndarray (row-major); numpy also
executes the elementwise/matmul arithmetic behind each primitive.  The
differentiation rules, the tape, and the scan primitives are implemented
here.

Broadcasting follows numpy's trailing-axis alignment and nothing more.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _sigmoid

from ..errors import ConfigurationError, NumericDomainError

__all__ = [
    "Array",
    "Tape",
    "FlopTally",
    "flop_tally",
    "as_array",
    "constant",
    "stop_gradient",
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "softplus",
    "recip",
    "max_pair",
    "sqrt",
    "sin",
    "cos",
    "gelu",
    "cumsum",
    "cummax",
    "linear_scan",
    "sum_",
    "mean",
    "reshape",
    "moveaxis",
    "slice_axis",
    "concat",
    "broadcast_to",
]


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


class FlopTally:
    """Exact operation counters: multiplications (divisions count here too),
    additions, and transcendental evaluations.

    Counts are integers derived from operand shapes only, so two runs over
    the same dataflow always tally identically.  Comparisons (max, cummax)
    are not counted.
    """

    __slots__ = ("mults", "adds", "transcendentals")

    def __init__(self) -> None:
        self.mults = 0
        self.adds = 0
        self.transcendentals = 0

    def count(self, mults: int = 0, adds: int = 0, transcendentals: int = 0) -> None:
        self.mults += mults
        self.adds += adds
        self.transcendentals += transcendentals


_ACTIVE_TALLY: FlopTally | None = None


class flop_tally:
    """Context manager that activates a :class:`FlopTally` for the block.

    Nesting is rejected: one tally owns the process-wide counter hook.
    """

    def __init__(self) -> None:
        self.tally = FlopTally()

    def __enter__(self) -> FlopTally:
        global _ACTIVE_TALLY
        if _ACTIVE_TALLY is not None:
            raise ConfigurationError("flop tallies do not nest")
        _ACTIVE_TALLY = self.tally
        return self.tally

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TALLY
        _ACTIVE_TALLY = None


def _count(mults: int = 0, adds: int = 0, transcendentals: int = 0) -> None:
    if _ACTIVE_TALLY is not None:
        _ACTIVE_TALLY.count(mults, adds, transcendentals)


# ---------------------------------------------------------------------------
# Array and tape
# ---------------------------------------------------------------------------


class Array:
    """A dense float64 tensor, optionally recorded on a tape.

    ``data`` is always a contiguous-row-major-capable numpy array of dtype
    float64; ``tape``/``tape_id`` identify the node that produced this value
    when it participates in differentiation.
    """

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data, tape: "Tape | None" = None, tape_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.tape = tape
        self.tape_id = tape_id

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        taped = "" if self.tape is None else f", node={self.tape_id}"
        return f"Array(shape={self.shape}{taped})"

    # -- constructors ---------------------------------------------------------

    @staticmethod
    def zeros(shape: Sequence[int] | int) -> "Array":
        return Array(np.zeros(shape, dtype=np.float64))

    @staticmethod
    def ones(shape: Sequence[int] | int) -> "Array":
        return Array(np.ones(shape, dtype=np.float64))

    @staticmethod
    def full(shape: Sequence[int] | int, value: float) -> "Array":
        return Array(np.full(shape, value, dtype=np.float64))

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, as_array(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_array(other))

    def __rsub__(self, other):
        return sub(as_array(other), self)

    def __mul__(self, other):
        return mul(self, as_array(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_array(other))

    def __rtruediv__(self, other):
        return div(as_array(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_array(other))


def as_array(x) -> Array:
    """Wrap scalars / ndarrays as (untaped) Arrays; pass Arrays through."""
    return x if isinstance(x, Array) else Array(x)


constant = as_array


def stop_gradient(x: Array) -> Array:
    """The same values, detached from any tape."""
    return Array(x.data)


class _Node:
    __slots__ = ("input_ids", "backward_fn")

    def __init__(self, input_ids, backward_fn):
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Append-only operation record for one differentiation pass.

    A tape is confined to a single thread; independent evaluations use
    independent tapes.  ``backward`` walks the node list once, in reverse
    append order, accumulating gradients per node handle.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, input_ids, backward_fn) -> int:
        self._nodes.append(_Node(input_ids, backward_fn))
        return len(self._nodes) - 1

    def watch(self, arr: Array) -> Array:
        """Register a leaf value (typically a parameter) on this tape."""
        node_id = self._append((), None)
        return Array(arr.data, self, node_id)

    def backward(self, root: Array) -> None:
        """Populate ``gradients`` with d(root)/d(node) for every node.

        ``root`` must be a scalar (size-1) value recorded on this tape; its
        own gradient is seeded with 1.
        """
        if root.tape is not self:
            raise ConfigurationError("backward root was not recorded on this tape")
        if root.size != 1:
            raise ConfigurationError("backward expects a scalar root")
        grads: dict[int, np.ndarray] = {root.tape_id: np.ones_like(root.data)}
        for node_id in range(len(self._nodes) - 1, -1, -1):
            gout = grads.get(node_id)
            if gout is None:
                continue
            node = self._nodes[node_id]
            if node.backward_fn is None:
                continue
            for input_id, g in zip(node.input_ids, node.backward_fn(gout)):
                if input_id is None or g is None:
                    continue
                acc = grads.get(input_id)
                grads[input_id] = g if acc is None else acc + g
        self.gradients = grads

    def grad(self, arr: Array) -> Array:
        """Gradient of the last ``backward`` root w.r.t. ``arr`` (zeros if
        the value never influenced the root)."""
        if arr.tape is not self:
            raise ConfigurationError("value was not recorded on this tape")
        g = self.gradients.get(arr.tape_id)
        return Array(np.zeros_like(arr.data) if g is None else g)


def _record(
    data: np.ndarray,
    inputs: tuple[Array, ...],
    backward_fn_builder: Callable[[], Callable[[np.ndarray], tuple]],
) -> Array:
    """Create the output Array, appending a tape node when inputs are taped.

    ``backward_fn_builder`` is only invoked when a tape is active, so
    operations pay no closure cost in pure inference."""
    tape: Tape | None = None
    for x in inputs:
        if x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ConfigurationError("operation mixes values from two tapes")
    if tape is None:
        return Array(data)
    ids = tuple(x.tape_id if x.tape is not None else None for x in inputs)
    node_id = tape._append(ids, backward_fn_builder())
    return Array(data, tape, node_id)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------


def bmm(a: Array, b: Array) -> Array:
    """Batched matrix product contracting a's last axis with b's second-to-last.

    Leading (batch) axes broadcast numpy-style.  Gradients:
    d a = g @ b^T, d b = a^T @ g (with broadcast axes summed out).
    """
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError("bmm operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(
            f"bmm inner extents disagree: {a.shape} @ {b.shape}"
        )
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = out.size // (m * n) if m * n else 0
    _count(mults=batch * m * n * k, adds=batch * m * n * max(k - 1, 0))

    def build():
        a_data, b_data = a.data, b.data
        a_shape, b_shape = a.shape, b.shape

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
            gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
            return _unbroadcast(ga, a_shape), _unbroadcast(gb, b_shape)

        return backward

    return _record(out, (a, b), build)


def matmul(a: Array, b: Array) -> Array:
    """Plain 2-D matrix product."""
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError("matmul expects 2-D operands; use bmm for stacks")
    return bmm(a, b)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a: Array, b: Array) -> Array:
    a, b = as_array(a), as_array(b)
    out = a.data + b.data
    _count(adds=out.size)

    def build():
        a_shape, b_shape = a.shape, b.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return backward

    return _record(out, (a, b), build)


def mul(a: Array, b: Array) -> Array:
    a, b = as_array(a), as_array(b)
    out = a.data * b.data
    _count(mults=out.size)

    def build():
        a_data, b_data = a.data, b.data
        a_shape, b_shape = a.shape, b.shape

        def backward(g):
            return (
                _unbroadcast(g * b_data, a_shape),
                _unbroadcast(g * a_data, b_shape),
            )

        return backward

    return _record(out, (a, b), build)


def neg(a: Array) -> Array:
    a = as_array(a)
    out = -a.data
    _count(mults=out.size)

    def build():
        return lambda g: (-g,)

    return _record(out, (a,), build)


def sub(a: Array, b: Array) -> Array:
    return add(a, neg(b))


def recip(a: Array) -> Array:
    """Elementwise reciprocal; d(1/x) = -1/x^2."""
    a = as_array(a)
    out = 1.0 / a.data
    _count(mults=out.size)

    def build():
        out_data = out

        def backward(g):
            return (-g * out_data * out_data,)

        return backward

    return _record(out, (a,), build)


def div(a: Array, b: Array) -> Array:
    return mul(a, recip(b))


def exp(a: Array) -> Array:
    a = as_array(a)
    out = np.exp(a.data)
    _count(transcendentals=out.size)

    def build():
        out_data = out
        return lambda g: (g * out_data,)

    return _record(out, (a,), build)


def log(a: Array) -> Array:
    a = as_array(a)
    if not (a.data > 0.0).all():
        raise NumericDomainError("log requires strictly positive inputs")
    out = np.log(a.data)
    _count(transcendentals=out.size)

    def build():
        a_data = a.data
        return lambda g: (g / a_data,)

    return _record(out, (a,), build)


def softplus(a: Array) -> Array:
    """log(1 + exp(x)) via the overflow-free branch max(x,0) + log1p(exp(-|x|))."""
    a = as_array(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    _count(transcendentals=2 * out.size, adds=out.size)

    def build():
        a_data = a.data
        return lambda g: (g * _sigmoid(a_data),)

    return _record(out, (a,), build)


def max_pair(a: Array, b: Array) -> Array:
    """Elementwise maximum; the gradient follows the larger input (ties go
    to the first operand)."""
    a, b = as_array(a), as_array(b)
    out = np.maximum(a.data, b.data)

    def build():
        take_a = a.data >= b.data
        a_shape, b_shape = a.shape, b.shape

        def backward(g):
            ga = np.where(take_a, g, 0.0)
            gb = np.where(take_a, 0.0, g)
            return _unbroadcast(ga, a_shape), _unbroadcast(gb, b_shape)

        return backward

    return _record(out, (a, b), build)


def sqrt(a: Array) -> Array:
    a = as_array(a)
    out = np.sqrt(a.data)
    _count(transcendentals=out.size)

    def build():
        out_data = out
        return lambda g: (0.5 * g / out_data,)

    return _record(out, (a,), build)


def sin(a: Array) -> Array:
    a = as_array(a)
    out = np.sin(a.data)
    _count(transcendentals=out.size)

    def build():
        a_data = a.data
        return lambda g: (g * np.cos(a_data),)

    return _record(out, (a,), build)


def cos(a: Array) -> Array:
    a = as_array(a)
    out = np.cos(a.data)
    _count(transcendentals=out.size)

    def build():
        a_data = a.data
        return lambda g: (-g * np.sin(a_data),)

    return _record(out, (a,), build)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Array) -> Array:
    """Exact Gaussian-error linear unit x * Phi(x)."""
    a = as_array(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf
    _count(transcendentals=out.size, mults=3 * out.size, adds=out.size)

    def build():
        def backward(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            return (g * (cdf + x * pdf),)

        return backward

    return _record(out, (a,), build)


# ---------------------------------------------------------------------------
# Prefix reductions and scans
# ---------------------------------------------------------------------------


def _check_axis(a: Array, axis: int) -> int:
    axis = axis if axis >= 0 else a.ndim + axis
    if not 0 <= axis < a.ndim:
        raise ConfigurationError(f"axis {axis} out of range for rank {a.ndim}")
    return axis


def cumsum(a: Array, axis: int) -> Array:
    """Inclusive prefix sum; the gradient is the reversed suffix sum."""
    a = as_array(a)
    axis = _check_axis(a, axis)
    out = np.cumsum(a.data, axis=axis)
    n = a.shape[axis]
    _count(adds=(a.size // n) * (n - 1) if n else 0)

    def build():
        def backward(g):
            rev = np.flip(g, axis=axis)
            return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

        return backward

    return _record(out, (a,), build)


def cummax(a: Array, axis: int) -> Array:
    """Inclusive running maximum; gradient flows to the first position where
    each running maximum was attained."""
    a = as_array(a)
    axis = _check_axis(a, axis)
    out = np.maximum.accumulate(a.data, axis=axis)

    def build():
        moved = np.moveaxis(a.data, axis, -1)
        lead_shape = moved.shape[:-1]
        n = moved.shape[-1]
        flat = moved.reshape(-1, n)
        prev = np.maximum.accumulate(flat, axis=1)
        is_new = np.empty(flat.shape, dtype=bool)
        is_new[:, 0] = True
        is_new[:, 1:] = flat[:, 1:] > prev[:, :-1]
        idx = np.where(is_new, np.arange(n), 0)
        np.maximum.accumulate(idx, axis=1, out=idx)

        def backward(g):
            gm = np.moveaxis(g, axis, -1).reshape(-1, n)
            ga = np.zeros_like(gm)
            rows = np.arange(gm.shape[0])[:, None]
            np.add.at(ga, (rows, idx), gm)
            return (np.moveaxis(ga.reshape(*lead_shape, n), -1, axis),)

        return backward

    return _record(out, (a,), build)


def linear_scan(decay: Array, update: Array, axis: int) -> Array:
    """First-order gated recurrence y_t = decay_t * y_{t-1} + update_t, y_0 = 0.

    ``decay`` must have the same rank as ``update`` with every extent either
    matching or 1 (state axes broadcast), and must match exactly along the
    scan axis.  The adjoint runs the reverse recurrence
    s_t = g_t + decay_{t+1} * s_{t+1}.
    """
    decay, update = as_array(decay), as_array(update)
    axis = _check_axis(update, axis)
    if decay.ndim != update.ndim:
        raise ConfigurationError("linear_scan decay/update ranks differ")
    for i, (da, ua) in enumerate(zip(decay.shape, update.shape)):
        if da != ua and da != 1:
            raise ConfigurationError(
                f"linear_scan decay extent {da} incompatible with {ua} at axis {i}"
            )
    if decay.shape[axis] != update.shape[axis]:
        raise ConfigurationError("linear_scan shapes must agree along the scan axis")

    u = np.moveaxis(update.data, axis, 0)
    d = np.moveaxis(decay.data, axis, 0)
    out_m = np.empty(u.shape, dtype=np.float64)
    n = u.shape[0]
    acc = np.zeros(u.shape[1:], dtype=np.float64)
    for t in range(n):
        np.multiply(d[t], acc, out=out_m[t])
        out_m[t] += u[t]
        acc = out_m[t]
    out = np.moveaxis(out_m, 0, axis)
    _count(mults=update.size, adds=update.size)

    def build():
        d_shape = decay.shape
        u_shape = update.shape
        y = out_m  # per-step states, needed by the adjoint

        def backward(g):
            gm = np.moveaxis(g, axis, 0)
            gu = np.empty_like(gm)
            gd_full = np.empty_like(gm)
            carry = np.zeros(gm.shape[1:], dtype=np.float64)
            for t in range(n - 1, -1, -1):
                s = gm[t] + carry
                gu[t] = s
                gd_full[t] = s * y[t - 1] if t > 0 else 0.0
                carry = d[t] * s
            gd = np.moveaxis(gd_full, 0, axis)
            gu_out = np.moveaxis(gu, 0, axis)
            return _unbroadcast(gd, d_shape), _unbroadcast(gu_out, u_shape)

        return backward

    return _record(out, (decay, update), build)


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum_(a: Array, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Array:
    a = as_array(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)
    _count(adds=max(a.size - out.size, 0))

    def build():
        a_shape = a.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a_shape).copy(),)
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax if ax >= 0 else len(a_shape) + ax for ax in axes)
            gk = g
            if not keepdims:
                for ax in sorted(axes):
                    gk = np.expand_dims(gk, ax)
            return (np.broadcast_to(gk, a_shape).copy(),)

        return backward

    return _record(out, (a,), build)


def mean(a: Array, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Array:
    a = as_array(a)
    out = sum_(a, axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)
    return mul(out, as_array(1.0 / count))


def reshape(a: Array, shape: Sequence[int]) -> Array:
    a = as_array(a)
    out = a.data.reshape(shape)

    def build():
        a_shape = a.shape
        return lambda g: (g.reshape(a_shape),)

    return _record(out, (a,), build)


def moveaxis(a: Array, src: int, dst: int) -> Array:
    a = as_array(a)
    out = np.moveaxis(a.data, src, dst).copy()

    def build():
        return lambda g: (np.moveaxis(g, dst, src),)

    return _record(out, (a,), build)


def slice_axis(a: Array, axis: int, start: int, stop: int) -> Array:
    """Contiguous slice along one axis; the gradient scatters back into zeros."""
    a = as_array(a)
    axis = _check_axis(a, axis)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()

    def build():
        a_shape = a.shape

        def backward(g):
            ga = np.zeros(a_shape, dtype=np.float64)
            ga[index] = g
            return (ga,)

        return backward

    return _record(out, (a,), build)


def concat(arrays: Iterable[Array], axis: int) -> Array:
    arrays = [as_array(x) for x in arrays]
    if not arrays:
        raise ConfigurationError("concat of zero arrays")
    axis = _check_axis(arrays[0], axis)
    out = np.concatenate([x.data for x in arrays], axis=axis)

    def build():
        sizes = [x.shape[axis] for x in arrays]
        bounds = np.cumsum([0] + sizes)

        def backward(g):
            pieces = []
            for i in range(len(sizes)):
                index = [slice(None)] * g.ndim
                index[axis] = slice(bounds[i], bounds[i + 1])
                pieces.append(g[tuple(index)])
            return tuple(pieces)

        return backward

    return _record(out, tuple(arrays), build)


def broadcast_to(a: Array, shape: Sequence[int]) -> Array:
    a = as_array(a)
    out = np.broadcast_to(a.data, tuple(shape)).copy()

    def build():
        a_shape = a.shape
        return lambda g: (_unbroadcast(g, a_shape),)

    return _record(out, (a,), build)
