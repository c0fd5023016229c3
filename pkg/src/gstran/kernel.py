"""Dense arrays with tape-based reverse-mode differentiation.

Every operation the network composes lives here. Arrays wrap a numpy
buffer; operations touching an array with ``requires_grad`` append a record
to the thread's active :class:`Tape`, and :func:`backward` replays that tape
in reverse, accumulating gradients into the inputs.

Leading batch axes are supported throughout: ``matmul`` broadcasts over
them, softmax normalizes the last axis and ``take_rows`` gathers rows per
batch item.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_EPS = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition of the kernel was violated."""


_local = threading.local()


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
        _local.grad_enabled = True
        _local.dtype = np.dtype(np.float32)
        _local.counter = None
    return _local


def default_dtype() -> np.dtype:
    return _state().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state().dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point precision."""
    st = _state()
    old = st.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


@contextmanager
def no_grad():
    st = _state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class OpCounter:
    """Tallies multiply-accumulates of ``matmul``/``linear`` and elements of
    every other op while active (see :func:`count_ops`)."""

    def __init__(self):
        self.macs = 0
        self.elements = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int, mac: bool = False):
        if mac:
            self.macs += n
        else:
            self.elements += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextmanager
def count_ops():
    st = _state()
    old = st.counter
    st.counter = OpCounter()
    try:
        yield st.counter
    finally:
        st.counter = old


def _count(op, n, mac=False):
    c = _state().counter
    if c is not None:
        c.add(op, int(n), mac)


class Tape:
    """Ordered log of executed operations.

    Usable as a context manager to make it the thread's active tape; the
    previous tape is restored on exit.
    """

    def __init__(self):
        self.records: list[tuple[DiffArray, tuple, Callable]] = []

    def __len__(self):
        return len(self.records)

    def record(self, out: "DiffArray", inputs: tuple, backward: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, backward))

    def clear(self) -> None:
        for out, _, _ in self.records:
            out._tape = None
        self.records = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False


def active_tape() -> Tape:
    return _state().tapes[-1]


class DiffArray:
    """An n-dimensional array participating in reverse-mode differentiation."""

    __array_priority__ = 100.0
    __slots__ = ("values", "grad", "requires_grad", "name", "_tape", "_grad_owned")

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(values, DiffArray):
            values = values.values
        if dtype is None:
            floating = isinstance(values, (np.ndarray, np.generic)) and values.dtype in (np.float32, np.float64)
            dtype = values.dtype if floating else default_dtype()
        self.values = np.ascontiguousarray(values, dtype=dtype)
        self.grad: np.ndarray | None = None
        self._grad_owned = False
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    # -- introspection
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return self.values.item()

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{flag})"

    def _accumulate(self, g: np.ndarray):
        # the first contribution is stored without copying; it may alias
        # another node's gradient, so it is never updated in place
        if self.grad is None:
            self.grad = g if g.dtype == self.values.dtype else g.astype(self.values.dtype)
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    # -- operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def Parameter(values, name: str = "", dtype=None) -> DiffArray:
    return DiffArray(values, requires_grad=True, dtype=dtype, name=name)


def as_array(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype or default_dtype()))


def _make(values: np.ndarray, inputs: tuple, backward: Callable) -> DiffArray:
    needs = _state().grad_enabled and any(a.requires_grad for a in inputs)
    out = DiffArray(values, requires_grad=needs, dtype=values.dtype)
    if needs:
        active_tape().record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    out_v = a.values + b.values
    _count("add", out_v.size)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_v, (a, b), bw)


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    out_v = a.values - b.values
    _count("sub", out_v.size)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_v, (a, b), bw)


def mul(a, b) -> DiffArray:
    """Elementwise (Hadamard) product."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    out_v = a.values * b.values
    _count("mul", out_v.size)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    return _make(out_v, (a, b), bw)


def div(a, b) -> DiffArray:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out_v = a.values / b.values
    _count("div", out_v.size)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_v / b.values, b.shape))

    return _make(out_v, (a, b), bw)


def neg(a) -> DiffArray:
    a = as_array(a)
    _count("neg", a.size)
    return _make(-a.values, (a,), lambda g: a._accumulate(-g))


def exp(a) -> DiffArray:
    a = as_array(a)
    out_v = np.exp(a.values)
    _count("exp", a.size)
    return _make(out_v, (a,), lambda g: a._accumulate(g * out_v))


def log(a) -> DiffArray:
    a = as_array(a)
    _count("log", a.size)
    return _make(np.log(a.values), (a,), lambda g: a._accumulate(g / a.values))


def abs(a) -> DiffArray:  # noqa: A001 - mirrors numpy naming
    a = as_array(a)
    _count("abs", a.size)
    sign = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: a._accumulate(g * sign))


def reciprocal_eps(a, eps: float = DEFAULT_EPS) -> DiffArray:
    """``1 / (a + eps)``."""
    a = as_array(a)
    _count("reciprocal_eps", a.size)
    out_v = 1.0 / (a.values + a.dtype.type(eps))
    return _make(out_v, (a,), lambda g: a._accumulate(-g * out_v * out_v))


def relu(a) -> DiffArray:
    a = as_array(a)
    _count("relu", a.size)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0).astype(a.dtype), (a,), lambda g: a._accumulate(g * mask))


_UNARY = {"neg": neg, "exp": exp, "abs": abs, "relu": relu, "log": log}
_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(op: str, *args, eps: float = DEFAULT_EPS) -> DiffArray:
    """Dispatch a pointwise operation by name."""
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "reciprocal_eps":
        return reciprocal_eps(args[0], eps)
    raise ValueError(f"unknown elementwise op {op!r}")


def _pair(a, b):
    if isinstance(a, DiffArray) and not isinstance(b, DiffArray):
        b = as_array(b, a)
    elif isinstance(b, DiffArray) and not isinstance(a, DiffArray):
        a = as_array(a, b)
    else:
        a, b = as_array(a), as_array(b)
    return a, b


# ------------------------------------------------------------------ linear algebra

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out_v = np.matmul(a.values, b.values)
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    _count("matmul", out_v.size * a.shape[-1], mac=True)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return _make(out_v, (a, b), bw)


def linear(x: DiffArray, w: DiffArray, b: DiffArray | None = None) -> DiffArray:
    """``x @ w + b`` applied over the last axis of ``x``."""
    x = as_array(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.values.reshape(-1, w.shape[0])
    out_v = x2 @ w.values
    if b is not None:
        out_v += b.values
    _count("linear", out_v.size * w.shape[0], mac=True)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ w.values.T).reshape(x.shape))
        if w.requires_grad:
            w._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _make(out_v.reshape(*lead, w.shape[1]), inputs, bw)


# ----------------------------------------------------------------- normalization

def softmax_rows(a: DiffArray) -> DiffArray:
    """Softmax over the last axis with max-subtraction."""
    a = as_array(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax_rows: empty rows")
    out_v = a.values - a.values.max(axis=-1, keepdims=True)
    np.exp(out_v, out=out_v)
    out_v /= out_v.sum(axis=-1, keepdims=True)
    _count("softmax", a.size)

    def bw(g):
        dot = np.einsum("...i,...i->...", g, out_v)[..., None]
        ga = g - dot
        ga *= out_v
        a._accumulate(ga)

    return _make(out_v, (a,), bw)


def log_softmax(a: DiffArray) -> DiffArray:
    a = as_array(a)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_v = z - lse
    _count("log_softmax", a.size)

    def bw(g):
        p = np.exp(out_v)
        a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _make(out_v, (a,), bw)


def normalize_rows(a: DiffArray) -> tuple[DiffArray, np.ndarray]:
    """Divide each last-axis row by its sum.

    Rows summing to zero become uniform ``1/n`` (and receive no gradient);
    their positions are returned as a boolean mask alongside the result.
    Inputs are expected to be nonnegative.
    """
    a = as_array(a)
    n = a.shape[-1]
    s = a.values.sum(axis=-1, keepdims=True)
    dead = s <= 0
    any_dead = bool(dead.any())
    safe = np.where(dead, 1, s).astype(a.dtype) if any_dead else s
    out_v = a.values / safe
    if any_dead:
        out_v[np.broadcast_to(dead, out_v.shape)] = 1.0 / n
    _count("normalize_rows", a.size)

    def bw(g):
        gi = g - np.einsum("...i,...i->...", g, out_v)[..., None]
        gi /= safe
        if any_dead:
            gi[np.broadcast_to(dead, gi.shape)] = 0
        a._accumulate(gi)

    return _make(out_v, (a,), bw), dead[..., 0]


# --------------------------------------------------------------------- reductions

def reduce(op: str, a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    """Sum, mean or max along ``axis`` (all axes when ``None``).

    The max gradient goes to the first maximal element along the axis.
    """
    a = as_array(a)
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"reduce: axis {axis} out of range for rank {a.ndim}")
        axis = axis % a.ndim
    _count(op, a.size)
    if op == "sum":
        out_v = a.values.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            g = g if keepdims or axis is None else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    elif op == "mean":
        count = a.size if axis is None else a.shape[axis]
        out_v = a.values.mean(axis=axis, keepdims=keepdims)

        def bw(g):
            g = g if keepdims or axis is None else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g / count, a.shape))

    elif op == "max":
        if axis is None:
            flat = int(np.argmax(a.values))
            out_v = a.values.max(keepdims=keepdims)

            def bw(g):
                gi = np.zeros(a.size, dtype=a.dtype)
                gi[flat] = np.asarray(g).reshape(-1)[0]
                a._accumulate(gi.reshape(a.shape))
        else:
            arg = np.argmax(a.values, axis=axis)
            out_v = a.values.max(axis=axis, keepdims=keepdims)

            def bw(g):
                g = g if keepdims else np.expand_dims(g, axis)
                gi = np.zeros_like(a.values)
                np.put_along_axis(gi, np.expand_dims(arg, axis), g, axis=axis)
                a._accumulate(gi)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out_v, dtype=a.dtype), (a,), bw)


# ----------------------------------------------------------------- shape movement

def reshape(a: DiffArray, shape) -> DiffArray:
    a = as_array(a)
    try:
        out_v = a.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out_v, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: DiffArray, axes=None) -> DiffArray:
    a = as_array(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.values, axes), (a,), lambda g: a._accumulate(np.transpose(g, inv)))


def index(a: DiffArray, key) -> DiffArray:
    """Basic numpy indexing with scatter-add backward."""
    a = as_array(a)
    out_v = a.values[key]

    def bw(g):
        gi = np.zeros_like(a.values)
        np.add.at(gi, key, g)
        a._accumulate(gi)

    return _make(np.array(out_v), (a,), bw)


def concat(arrays: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    arrays = [as_array(x) for x in arrays]
    try:
        out_v = np.concatenate([x.values for x in arrays], axis=axis)
    except ValueError:
        shapes = [x.shape for x in arrays]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def bw(g):
        for x, part in zip(arrays, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return _make(out_v, tuple(arrays), bw)


def stack(arrays: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    arrays = [as_array(x) for x in arrays]
    expanded = [reshape(x, _insert_axis(x.shape, axis)) for x in arrays]
    return concat(expanded, axis=axis)


def _insert_axis(shape, axis):
    shape = list(shape)
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(axis, 1)
    return tuple(shape)


def take_rows(a: DiffArray, idx: np.ndarray) -> DiffArray:
    """Gather rows along the second-to-last axis, per batch item.

    ``a`` has shape ``(*B, N, C)`` and ``idx`` integer shape ``(*B, *S)``;
    the result has shape ``(*B, *S, C)``.
    """
    a = as_array(a)
    idx = np.asarray(idx)
    batch = a.shape[:-2]
    n, c = a.shape[-2], a.shape[-1]
    if idx.shape[: len(batch)] != batch:
        raise DimensionError(f"take_rows: index batch {idx.shape} does not match {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take_rows: index out of range for {n} rows")
    nb = int(np.prod(batch, dtype=np.int64))
    flat = (idx.reshape(nb, -1) + (np.arange(nb) * n)[:, None]).reshape(-1)
    src = a.values.reshape(nb * n, c)
    out_v = src[flat].reshape(*idx.shape, c)
    _count("take_rows", out_v.size)

    def bw(g):
        gi = np.zeros((nb * n, c), dtype=a.dtype)
        np.add.at(gi, flat, g.reshape(-1, c))
        a._accumulate(gi.reshape(a.shape))

    return _make(out_v, (a,), bw)


def dropout(a: DiffArray, p: float, rng: np.random.Generator) -> DiffArray:
    if p <= 0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1 - p)
    return mul(a, DiffArray(keep))


# ------------------------------------------------------------------------ backward

def backward(root: DiffArray) -> None:
    """Populate ``.grad`` of every ``requires_grad`` ancestor of a scalar root.

    The tape that produced ``root`` is replayed newest-first and then
    cleared, so each forward pass supports a single backward.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise ContractError("backward root was not produced on an active tape")
    root.grad = np.ones_like(root.values)
    for out, _, bw in reversed(tape.records):
        if out.grad is not None:
            bw(out.grad)
    for out, _, _ in tape.records:
        if out is not root:
            out.grad = None
    tape.clear()
