"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(tape, loss)

Outside a tape every operation is a plain numpy computation, which is what
inference uses. Every forward and backward result is checked for NaN/Inf; the
first non-finite value raises :class:`NonFiniteError` naming the operation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "elementwise",
    "matmul",
    "activation",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "exp",
    "log",
    "maximum",
    "concat",
    "stack",
    "record_op",
    "grad_check",
    "GradCheckResult",
    "no_tape",
]

_STATE = threading.local()  # tapes are per thread


def _active() -> list["Tape"]:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = _STATE.tapes = []
    return stack


def _check_finite(name: str, arr: np.ndarray, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where} of '{name}'", field=name)


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_taped")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        # True when produced by a recorded op (interior node).
        self._taped = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._taped = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("mul", self, -1.0), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other), self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    name: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so inputs always precede the ops
    that consume them and a reverse sweep is a valid topological order.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Temporarily suspend recording (used for frozen sub-networks)."""

    def __enter__(self):
        stack = _active()
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        _active().extend(self._saved)


def record_op(
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of op ``name`` and tape it if needed.

    ``backward_fn`` maps the output gradient to one gradient per input (or
    ``None`` for inputs that receive none). Custom differentiable ops in other
    modules are built with this.
    """
    _check_finite(name, data)
    out = Tensor._wrap(data)
    stack = _active()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._taped = True
        stack[-1].nodes.append(_Node(name, out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def elementwise(kind: str, a, b) -> Tensor:
    """add/sub/mul/div with ``b`` equal-shaped, broadcastable or a scalar."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not match") from None
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
    elif kind == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    elif kind == "mul":
        out = x * y

        def bw(g):
            return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)
    elif kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y

        def bw(g):
            return _unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)
    else:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return record_op(kind, out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        if x.ndim == 1 and y.ndim == 1:
            return g * y, g * x
        if x.ndim == 1:
            return y @ g, np.outer(x, g)
        if y.ndim == 1:
            return np.outer(g, y), x.T @ g
        return g @ y.T, x.T @ g

    return record_op("matmul", x @ y, (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    # relu'(0) := 0
    mask = x.data > 0
    return record_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op("softmax", y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record_op("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return record_op("log", y, (x,), lambda g: (g / xd,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    y = xd**p
    return record_op("pow", y, (x,), lambda g: (g * p * xd ** (p - 1),))


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; gradient flows only where ``x > floor``."""
    mask = x.data > floor
    return record_op("maximum", np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


_ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "softmax": softmax}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("sum", np.asarray(out, dtype=np.float64), (x,), bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return elementwise("mul", reduce_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    return record_op("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    shape = x.shape
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    advanced = isinstance(index, (list, np.ndarray)) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    )

    def bw(g):
        gx = np.zeros(shape)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return record_op("index", np.array(out, dtype=np.float64), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, splits, axis=axis)

    return record_op("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return record_op("stack", out, tensors, bw)


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` tensor on ``tape``.

    Gradients are overwritten, not accumulated across calls, so replaying the
    same tape twice gives identical results.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    for node in tape.nodes:
        node.output.grad = None
        for t in node.inputs:
            t.grad = None
    root.grad = np.ones(root.shape)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            _check_finite(node.name, gi, "backward")
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad = t.grad + gi
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and not t._taped and t.grad is None:
                t.grad = np.zeros(t.shape)


@dataclass
class GradCheckResult:
    """Outcome of :func:`grad_check`.

    ``excluded`` lists flat coordinates whose one-sided differences disagree
    (a kink such as relu at 0); they do not count toward ``max_error``.
    """

    max_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: list[int] = field(default_factory=list)
    finite: bool = True

    def ok(self, tol: float) -> bool:
        return self.finite and self.max_error <= tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    kink_tol: float = 1e-2,
) -> GradCheckResult:
    """Compare the taped gradient of scalar ``f`` at ``x`` with central differences.

    Error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        if y.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        backward(tape, y)
    except NonFiniteError:
        return GradCheckResult(np.inf, np.array([]), np.array([]), [], False)
    analytic = x.grad.copy()
    base = y.item()

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    excluded = []
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckResult(np.inf, analytic, numeric, excluded, False)
            numeric[i] = (fp - fm) / (2 * step)
            right = (fp - base) / step
            left = (base - fm) / step
            if abs(right - left) > kink_tol * max(abs(right), abs(left), 1.0):
                excluded.append(i)
    except NonFiniteError:
        return GradCheckResult(np.inf, analytic, numeric, excluded, False)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    if excluded:
        err[excluded] = 0.0
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckResult(max_err, analytic, numeric.reshape(x.shape), excluded)
