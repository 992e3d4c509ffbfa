"""Dense float64 tensors and a reverse-mode differentiation tape.

Operations record themselves on the active :class:`Tape` whenever at least one
input requires a gradient.  Backward rules live in :data:`BACKWARD_RULES`, keyed
by op name, so the gradient checker can report failures per op.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DTYPE = np.float64
STD_EPS = 1e-8


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("fusionattn_tape", default=None)


class Tensor:
    """N-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _from_array(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == DTYPE else arr.astype(DTYPE)
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = None
        t._tape = None
        t.name = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor._from_array(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor is not on a tape (detached or created outside a Tape context)")
        self._tape.backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: Any = None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are recorded here.  A tape
    can be backpropagated once; call :meth:`reset` to reuse it.
    """

    nodes: list[Node] = field(default_factory=list)
    _consumed: bool = False
    _tokens: list = field(default_factory=list)

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, ctx: Any = None) -> None:
        if self._consumed:
            raise TapeError("tape already backpropagated; reset() before recording again")
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(op, tuple(inputs), output, ctx))

    def reset(self) -> None:
        for node in self.nodes:
            node.output.node_id = None
            node.output._tape = None
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss is detached from this tape")
        if self._consumed:
            raise TapeError("backward already called on this tape; reset() first")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.output.node_id, None)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[node.op](node.ctx, node.inputs, node.output, g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp.node_id is not None:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = gi if prev is None else prev + gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=DTYPE)
                else:
                    inp.grad += gi


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], ctx: Any = None) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record it when gradients are needed.

    Custom fused ops (e.g. the GRU recurrence) register a backward rule in
    :data:`BACKWARD_RULES` and call this to join the tape.
    """
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_array(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, ctx)
    return out


BackwardRule = Callable[[Any, tuple, Tensor, np.ndarray], Sequence[np.ndarray | None]]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def backward_rule(name: str):
    def register(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[name] = fn
        return fn

    return register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        # (..., m, k) @ (k, n): one 2-D gemm over the flattened leading axes
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        return record_op("matmul", out, (a, b), "right2d")
    if a.ndim == 2:
        # (m, k) @ (..., k, n): move k to the front so the batch folds into columns
        cols = np.moveaxis(b.data, -2, 0).reshape(b.shape[-2], -1)
        out = np.moveaxis((a.data @ cols).reshape((a.shape[0],) + b.shape[:-2] + (b.shape[-1],)), 0, -2)
        return record_op("matmul", np.ascontiguousarray(out), (a, b), "left2d")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    return record_op("matmul", out, (a, b), "batched")


@backward_rule("matmul")
def _matmul_backward(mode, inputs, out, g):
    a, b = inputs
    ga = gb = None
    if mode == "right2d":
        g2 = g.reshape(-1, g.shape[-1])
        if a.requires_grad:
            ga = (g2 @ b.data.T).reshape(a.shape)
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
    elif mode == "left2d":
        gcols = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
        if a.requires_grad:
            ga = gcols @ np.moveaxis(b.data, -2, 0).reshape(b.shape[-2], -1).T
        if b.requires_grad:
            gb_cols = (a.data.T @ gcols).reshape((b.shape[-2],) + b.shape[:-2] + (b.shape[-1],))
            gb = np.moveaxis(gb_cols, 0, -2)
    else:
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), transpose(weight)), (weight.shape[0],))
    else:
        y = matmul(x, transpose(weight))
    return add_bias(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# pointwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b))


@backward_rule("add")
def _add_backward(ctx, inputs, out, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b))


@backward_rule("sub")
def _sub_backward(ctx, inputs, out, g):
    return g, -g


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` broadcasts to ``x.shape`` (e.g. a row or column bias)."""
    try:
        ok = np.broadcast_shapes(x.shape, b.shape) == x.shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not broadcast to {x.shape}")
    return record_op("add_bias", x.data + b.data, (x, b))


@backward_rule("add_bias")
def _add_bias_backward(ctx, inputs, out, g):
    x, b = inputs
    return g, _unbroadcast(g, b.shape)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    return record_op("hadamard", a.data * b.data, (a, b))


@backward_rule("hadamard")
def _hadamard_backward(ctx, inputs, out, g):
    a, b = inputs
    return g * b.data, g * a.data


def scale(x: Tensor, c: float) -> Tensor:
    return record_op("scale", x.data * c, (x,), c)


@backward_rule("scale")
def _scale_backward(c, inputs, out, g):
    return (g * c,)


def sigmoid(x: Tensor) -> Tensor:
    # 0.5*(1+tanh(x/2)) avoids overflow in exp for large |x|
    return record_op("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * x.data)), (x,))


@backward_rule("sigmoid")
def _sigmoid_backward(ctx, inputs, out, g):
    y = out.data
    return (g * y * (1.0 - y),)


def tanh(x: Tensor) -> Tensor:
    return record_op("tanh", np.tanh(x.data), (x,))


@backward_rule("tanh")
def _tanh_backward(ctx, inputs, out, g):
    y = out.data
    return (g * (1.0 - y * y),)


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    xd = x.data if floor is None else np.maximum(x.data, floor)
    if np.any(xd <= 0):
        raise NumericError("log of non-positive value")
    return record_op("log", np.log(xd), (x,), floor)


@backward_rule("log")
def _log_backward(floor, inputs, out, g):
    (x,) = inputs
    gx = g / np.maximum(x.data, floor) if floor is not None else g / x.data
    if floor is not None:
        gx = np.where(x.data < floor, 0.0, gx)
    return (gx,)


POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "hadamard": hadamard, "scale": scale}


def pointwise(fn: str, *args):
    try:
        op = POINTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown pointwise fn {fn!r}; expected one of {sorted(POINTWISE)}") from None
    return op(*args)


# ---------------------------------------------------------------------------
# reductions and normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record_op("softmax", y, (x,), axis)


@backward_rule("softmax")
def _softmax_backward(axis, inputs, out, g):
    y = out.data
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record_op("sum", np.array(x.data.sum()), (x,))


@backward_rule("sum")
def _sum_backward(ctx, inputs, out, g):
    (x,) = inputs
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise ShapeError(f"mean: empty input of shape {x.shape}")
    return record_op("mean", np.array(x.data.mean(axis=axis)), (x,), axis)


@backward_rule("mean")
def _mean_backward(axis, inputs, out, g):
    (x,) = inputs
    if axis is None:
        return (np.full(x.shape, float(g) / x.size),)
    n = x.shape[axis]
    return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)


def std(x: Tensor, axis: int = 0, eps: float = STD_EPS) -> Tensor:
    """Population standard deviation, ``sqrt(var + eps)``."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"std: empty input of shape {x.shape}")
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    s = np.sqrt((centered**2).mean(axis=axis) + eps)
    return record_op("std", s, (x,), (axis, centered))


@backward_rule("std")
def _std_backward(ctx, inputs, out, g):
    axis, centered = ctx
    n = centered.shape[axis]
    return (np.expand_dims(g / out.data, axis) * centered / n,)


def mean_std(x: Tensor, axis: int = 0, eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    """Per-column mean and population std over ``axis`` (rows by default)."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"mean_std: empty input of shape {x.shape}")
    return mean(x, axis), std(x, axis, eps)


# ---------------------------------------------------------------------------
# structural


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    return record_op("concat", np.concatenate([t.data for t in xs], axis=ax), tuple(xs), (ax, sizes))


@backward_rule("concat")
def _concat_backward(ctx, inputs, out, g):
    ax, sizes = ctx
    return np.split(g, np.cumsum(sizes)[:-1], axis=ax)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("stack: no inputs")
    if any(t.shape != xs[0].shape for t in xs):
        raise ShapeError(f"stack: shapes differ {[x.shape for x in xs]}")
    return record_op("stack", np.stack([t.data for t in xs], axis=axis), tuple(xs), axis)


@backward_rule("stack")
def _stack_backward(axis, inputs, out, g):
    return [np.take(g, i, axis=axis) for i in range(len(inputs))]


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc
    return record_op("reshape", y, (x,))


@backward_rule("reshape")
def _reshape_backward(ctx, inputs, out, g):
    return (g.reshape(inputs[0].shape),)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need ndim >= 2, got {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    return record_op("transpose", np.ascontiguousarray(np.transpose(x.data, axes)), (x,), axes)


@backward_rule("transpose")
def _transpose_backward(axes, inputs, out, g):
    return (np.transpose(g, np.argsort(axes)),)


def getitem(x: Tensor, index) -> Tensor:
    return record_op("getitem", np.array(x.data[index]), (x,), index)


@backward_rule("getitem")
def _getitem_backward(index, inputs, out, g):
    gx = np.zeros(inputs[0].shape)
    np.add.at(gx, index, g)
    return (gx,)


def pick(x: Tensor, labels: Sequence[int]) -> Tensor:
    """``x[i, labels[i]]`` for each row ``i`` of a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"pick: expected labels of shape ({x.shape[0]},) for {x.shape}, got {labels.shape}")
    rows = np.arange(x.shape[0])
    return record_op("pick", x.data[rows, labels].copy(), (x,), (rows, labels))


@backward_rule("pick")
def _pick_backward(ctx, inputs, out, g):
    rows, labels = ctx
    gx = np.zeros(inputs[0].shape)
    np.add.at(gx, (rows, labels), g)
    return (gx,)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[Tensor], Any], x: Tensor | np.ndarray, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    """
    arr = x.data if isinstance(x, Tensor) else x
    target = x if isinstance(x, Tensor) else Tensor._from_array(arr)
    grad = np.zeros_like(arr, dtype=DTYPE)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(target))
        flat[i] = orig - h
        fm = _scalar(f(target))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor._from_array(grad)


def _scalar(v: Any) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
