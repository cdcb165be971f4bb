"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation applied to a tensor that requires a gradient
is appended to the active :class:`Tape`. Because records are appended in
creation order, the tape is already topologically sorted and the backward
pass is a single reverse sweep over it.

Broadcasting follows NumPy rules; gradients are summed back down to the
shape of each input.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InvalidMaskError, NumericError

__all__ = [
    "DimensionError",
    "InvalidMaskError",
    "NumericError",
    "ContractError",
    "Tensor",
    "Tape",
    "as_tensor",
    "current_tape",
    "no_grad",
    "detect_anomaly",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "stack",
    "masked_softmax",
    "log_softmax",
    "dropout",
    "elementwise",
    "backward",
    "finite_diff_check",
    "gradient_check",
]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to scope recording; outside any ``with`` block
    operations go to a per-thread default tape.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def clear(self):
        self.nodes.clear()

    def backward(self, loss: "Tensor", retain: bool = False):
        """Populate ``grad`` on every leaf reachable from ``loss``.

        Leaf gradients accumulate into any existing ``grad`` buffer; callers
        zero them between steps. The tape is cleared afterwards unless
        ``retain`` is set.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        seed = np.ones_like(loss.data)
        if loss._backward is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
            return
        grads: dict[int, np.ndarray] = {id(loss): seed}
        reached = False
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            reached = reached or node is loss
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        if not reached:
            raise ContractError("loss was not recorded on this tape")
        if not retain:
            self.clear()


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = [Tape()]
        self.grad_enabled = True
        self.anomaly = False


_state = _State()


def _accumulate_leaf(t: "Tensor", g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def current_tape() -> Tape:
    return _state.tapes[-1]


@contextmanager
def no_grad():
    """Disable recording; results never require a gradient."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def detect_anomaly():
    """Raise :class:`NumericError` as soon as any op produces NaN or Inf."""
    prev = _state.anomaly
    _state.anomaly = True
    try:
        yield
    finally:
        _state.anomaly = prev


class Tensor:
    """An n-dimensional float64 array that may participate in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        current_tape().backward(self)

    # operators
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
        return _unary(self, -self.data, lambda g: -g)

    def __pow__(self, exponent: float):
        x = self.data
        return _unary(self, x**exponent, lambda g: g * exponent * x ** (exponent - 1))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(src))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inv))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return _unary(self, np.swapaxes(self.data, a, b), lambda g: np.swapaxes(g, a, b))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str = "") -> Tensor:
    if _state.anomaly and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op or 'op'} with shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _state.tapes[-1].nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unary(x: Tensor, data: np.ndarray, grad_fn: Callable, op: str = "") -> Tensor:
    return _result(data, (x,), lambda g: (grad_fn(g),), op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def grad(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), grad, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def grad(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _result(ad / bd, (a, b), grad, "div")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _unary(x, x.data * factor, lambda g: g * factor, "scale")


def matmul(a, b) -> Tensor:
    """Matrix product with NumPy batching semantics (operands of rank >= 1)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != k_b:
        raise DimensionError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        out_shape = np.matmul(np.empty(a.shape, dtype=np.int8), np.empty(b.shape, dtype=np.int8)).shape
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        b2 = b.reshape(-1, 1) if b.ndim == 1 else b
        return matmul(a2, b2).reshape(out_shape)
    ad, bd = a.data, b.data

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # shared right operand: fold the batch axes into one product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), grad, "matmul")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _unary(x, np.log(xd), lambda g: g / xd, "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _unary(x, y, lambda g: g * y * (1.0 - y), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: g * (1.0 - y * y), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _unary(x, np.where(on, x.data, 0.0), lambda g: g * on, "relu")


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(y), (x,), grad, "sum")


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(x.data[index]), (x,), grad, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, grad, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}") from err
    n = len(tensors)

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(data, tensors, grad, "stack")


def masked_softmax(logits, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is nonzero.

    Masked positions get exactly zero weight. ``mask`` is a constant array
    broadcastable to ``logits``; every slice along ``axis`` must keep at least
    one position.
    """
    logits = as_tensor(logits)
    keep = np.broadcast_to(np.asarray(mask) != 0, logits.shape)
    if not np.all(keep.any(axis=axis)):
        raise InvalidMaskError("mask selects no position along the softmax axis")
    z = np.where(keep, logits.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (logits,), grad, "masked_softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def grad(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), grad, "log_softmax")


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) during training only."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "scale": scale,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise ops."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def backward(loss: Tensor):
    current_tape().backward(loss)


def _central_difference(f: Callable[[], Tensor], x: Tensor, eps: float) -> np.ndarray:
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * eps)
    return fd


def _relative_error(ad: np.ndarray, fd: np.ndarray) -> float:
    if ad.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative gap between the tape gradient of ``f`` at ``x`` and
    central differences, using ``|ad - fd| / max(1, |fd|)`` per coordinate."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    fd = _central_difference(lambda: f(x), x, eps)
    x.requires_grad = was
    return _relative_error(ad, fd)


def gradient_check(
    loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor] | Iterable[tuple[str, Tensor]], eps: float = 1e-5
) -> dict[str, float]:
    """Per-tensor finite-difference check of a closure over several inputs."""
    items = list(tensors.items() if isinstance(tensors, dict) else tensors)
    for _, t in items:
        t.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())
    errors = {}
    for name, t in items:
        ad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        errors[name] = _relative_error(ad, _central_difference(loss_fn, t, eps))
        t.grad = None
    return errors
