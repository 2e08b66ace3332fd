"""Tape-based reverse-mode autodiff over dense numpy arrays.

Every differentiable computation in the package is expressed with the
operations registered here.  A :class:`Tape` must be active for anything to
be recorded; outside a tape the operations simply evaluate (no-grad mode).

Reductions run in numpy's fixed order, so identical inputs give identical
bits on one machine.  ``backward`` consumes its tape: calling it a second
time on the same tape raises :class:`TapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np


class EngineError(Exception):
    pass


class ShapeError(EngineError, ValueError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


class TapeError(EngineError, RuntimeError):
    pass


_cfg = threading.local()


def _get(name, default):
    return getattr(_cfg, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float64))


def checked() -> bool:
    return _get("checked", False)


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _cfg.dtype = np.dtype(np.float32 if bits == 32 else np.float64)


def set_checked(flag: bool) -> None:
    _cfg.checked = bool(flag)


@contextlib.contextmanager
def precision(bits: int):
    old = default_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _cfg.dtype = old


@contextlib.contextmanager
def checked_mode(flag: bool = True):
    old = checked()
    set_checked(flag)
    try:
        yield
    finally:
        _cfg.checked = old


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "retain_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if checked() and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.retain_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: Any


@dataclass
class Tape:
    """Ordered record of operations; nodes only ever reference earlier outputs."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        stack = _get("tapes", None)
        if stack is None:
            stack = _cfg.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _cfg.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    stack = _get("tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    stack = _get("tapes", None)
    if stack is None:
        stack = _cfg.tapes = []
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable
    masked: bool = False  # backward takes a per-input ``needs`` mask


OPS: dict[str, OpDef] = {}


def register(kind: str):
    def deco(cls):
        OPS[kind] = OpDef(cls.forward, cls.backward, getattr(cls, "masked", False))
        return cls

    return deco


def record(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate ``kind`` on ``inputs`` and append a node to the active tape."""
    try:
        op = OPS[kind]
    except KeyError:
        raise EngineError(f"unknown op {kind!r}") from None
    inputs = tuple(as_tensor(x) for x in inputs)
    out, ctx = op.forward(*(t.data for t in inputs), **attrs)
    dt = default_dtype()
    if out.dtype != dt and out.dtype.kind == "f":
        out = out.astype(dt)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.name = None
    res.retain_grad = False
    res.requires_grad = False
    if checked() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind}: produced non-finite values")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise TapeError("cannot record onto a tape that has been back-propagated")
        res.requires_grad = True
        tape.nodes.append(Node(kind, inputs, res, ctx))
    return res


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate ``loss`` through ``tape``.

    Returns a map from leaf tensor to its gradient.  When ``params`` is given
    the map holds exactly those tensors, zero-filled when unreachable.
    Leaf ``.grad`` slots are accumulated, and intermediate tensors flagged
    with ``retain_grad`` receive their gradient too.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward called twice on the same tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        produced.add(id(node.output))
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.retain_grad:
            node.output.grad = g
        op = OPS[node.kind]
        if op.masked:
            in_grads = op.backward(node.ctx, g, tuple(t.requires_grad for t in node.inputs))
        else:
            in_grads = op.backward(node.ctx, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = g
    if params is not None:
        out = {p: out.get(p, np.zeros_like(p.data)) for p in params}
    tape.nodes.clear()
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


@register("add")
class _Add:
    masked = True

    @staticmethod
    def forward(a, b):
        _broadcast_shape("add", a, b)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None), (_unbroadcast(g, sb) if needs[1] else None)


@register("sub")
class _Sub:
    masked = True

    @staticmethod
    def forward(a, b):
        _broadcast_shape("sub", a, b)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None), (_unbroadcast(-g, sb) if needs[1] else None)


@register("mul")
class _Mul:
    masked = True

    @staticmethod
    def forward(a, b):
        _broadcast_shape("mul", a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g, needs):
        a, b = ctx
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@register("div")
class _Div:
    masked = True

    @staticmethod
    def forward(a, b):
        _broadcast_shape("div", a, b)
        out = a / b
        return out, (a, b, out)

    @staticmethod
    def backward(ctx, g, needs):
        a, b, out = ctx
        gb = g / b
        return (
            _unbroadcast(gb, a.shape) if needs[0] else None,
            _unbroadcast(-gb * out, b.shape) if needs[1] else None,
        )


# ---------------------------------------------------------------------------
# elementwise unary


@register("neg")
class _Neg:
    @staticmethod
    def forward(a):
        return -a, None

    @staticmethod
    def backward(ctx, g):
        return (-g,)


@register("abs")
class _Abs:
    @staticmethod
    def forward(a):
        return np.abs(a), np.sign(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


@register("exp")
class _Exp:
    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


@register("log")
class _Log:
    @staticmethod
    def forward(a):
        return np.log(a), a

    @staticmethod
    def backward(ctx, g):
        return (g / ctx,)


@register("sin")
class _Sin:
    @staticmethod
    def forward(a):
        return np.sin(a), a

    @staticmethod
    def backward(ctx, g):
        return (g * np.cos(ctx),)


@register("cos")
class _Cos:
    @staticmethod
    def forward(a):
        return np.cos(a), a

    @staticmethod
    def backward(ctx, g):
        return (-g * np.sin(ctx),)


@register("relu")
class _Relu:
    @staticmethod
    def forward(a):
        mask = a > 0
        return np.where(mask, a, 0.0).astype(a.dtype), mask

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


@register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out, out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx * (1.0 - ctx),)


@register("square_root")
class _Sqrt:
    @staticmethod
    def forward(a):
        out = np.sqrt(a)
        return out, out

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx,)


@register("power")
class _Power:
    @staticmethod
    def forward(a, *, p):
        return a**p, (a, p)

    @staticmethod
    def backward(ctx, g):
        a, p = ctx
        if p == 0:
            return (np.zeros_like(a),)
        return (g * p * a ** (p - 1),)


@register("clamp")
class _Clamp:
    @staticmethod
    def forward(a, *, lo=None, hi=None):
        out = np.clip(a, lo, hi)
        inside = np.ones(a.shape, dtype=bool)
        if lo is not None:
            inside &= a >= lo
        if hi is not None:
            inside &= a <= hi
        return out, inside

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(a, *, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
        return out, (out, axis)

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# reductions and structure


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
class _Sum:
    @staticmethod
    def forward(a, *, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, _norm_axes(axis, a.ndim), keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axes, keepdims = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


@register("mean")
class _Mean:
    @staticmethod
    def forward(a, *, axis=None, keepdims=False):
        axes = _norm_axes(axis, a.ndim)
        n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return np.mean(a, axis=axis, keepdims=keepdims), (a.shape, axes, keepdims, n)

    @staticmethod
    def backward(ctx, g):
        shape, axes, keepdims, n = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)


@register("cumsum")
class _Cumsum:
    @staticmethod
    def forward(a, *, axis):
        return np.cumsum(a, axis=axis), axis

    @staticmethod
    def backward(ctx, g):
        axis = ctx
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)


@register("matmul")
class _Matmul:
    masked = True

    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
        return a @ b, (a, b)

    @staticmethod
    def backward(ctx, g, needs):
        a, b = ctx
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb


@register("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[a.shape for a in arrays]} on axis {axis}") from None
        sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out, (axis, sizes)

    @staticmethod
    def backward(ctx, g):
        axis, sizes = ctx
        return tuple(np.split(g, sizes, axis=axis))


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, *, shape):
        try:
            return a.reshape(shape), a.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx),)


@register("transpose")
class _Transpose:
    @staticmethod
    def forward(a, *, axes=None):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        return np.transpose(a, axes), axes

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx)),)


@register("slice")
class _Slice:
    @staticmethod
    def forward(a, *, key):
        return a[key], (a.shape, a.dtype, key)

    @staticmethod
    def backward(ctx, g):
        shape, dtype, key = ctx
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        return (out,)


def _scatter_rows(index, g, n_rows):
    """Sum rows of ``g`` into ``n_rows`` buckets given by ``index`` (deterministic)."""
    flat_idx = index.reshape(-1)
    rest = g.shape[index.ndim:]
    gg = g.reshape(flat_idx.size, -1)
    out = np.empty((n_rows, gg.shape[1]), dtype=g.dtype)
    if gg.shape[1] <= 16:
        for c in range(gg.shape[1]):
            out[:, c] = np.bincount(flat_idx, weights=gg[:, c], minlength=n_rows)
    else:
        out[:] = 0
        np.add.at(out, flat_idx, gg)
    return out.reshape((n_rows,) + rest)


@register("gather")
class _Gather:
    @staticmethod
    def forward(a, *, index, axis=0):
        index = np.asarray(index)
        if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
            raise ShapeError(f"gather: index out of range for axis {axis} of shape {a.shape}")
        return np.take(a, index, axis=axis), (a.shape, index, axis)

    @staticmethod
    def backward(ctx, g):
        shape, index, axis = ctx
        index = np.where(index < 0, index + shape[axis], index)
        if axis != 0:
            g = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
            moved = (shape[axis],) + shape[:axis] + shape[axis + 1:]
            out = _scatter_rows(index, np.ascontiguousarray(g), moved[0]).reshape(moved)
            return (np.moveaxis(out, 0, axis),)
        return (_scatter_rows(index, g, shape[0]),)


# ---------------------------------------------------------------------------
# public functional API


def add(a, b):
    return record("add", [a, b])


def sub(a, b):
    return record("sub", [a, b])


def mul(a, b):
    return record("mul", [a, b])


def div(a, b):
    return record("div", [a, b])


def neg(a):
    return record("neg", [a])


def abs_(a):
    return record("abs", [a])


def exp(a):
    return record("exp", [a])


def log(a):
    return record("log", [a])


def sin(a):
    return record("sin", [a])


def cos(a):
    return record("cos", [a])


def relu(a):
    return record("relu", [a])


def sigmoid(a):
    return record("sigmoid", [a])


def sqrt(a):
    return record("square_root", [a])


def power(a, p):
    return record("power", [a], p=p)


def clamp(a, lo=None, hi=None):
    return record("clamp", [a], lo=lo, hi=hi)


def softmax(a, axis=-1):
    return record("softmax", [a], axis=axis)


def sum_(a, axis=None, keepdims=False):
    return record("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return record("mean", [a], axis=axis, keepdims=keepdims)


def cumsum(a, axis=-1):
    return record("cumsum", [a], axis=axis)


def matmul(a, b):
    return record("matmul", [a, b])


def concat(tensors, axis=0):
    return record("concat", list(tensors), axis=axis)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else tensors[0].ndim + 1 + axis
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def reshape(a, shape):
    return record("reshape", [a], shape=tuple(shape))


def transpose(a, axes=None):
    return record("transpose", [a], axes=None if axes is None else tuple(axes))


def slice_(a, key):
    return record("slice", [a], key=key)


def gather(a, index, axis=0):
    return record("gather", [a], index=np.asarray(index), axis=axis)
