"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor` values. While a
:class:`Tape` is active, every operation whose inputs require gradients is
appended to the tape; :meth:`Tape.backward` then walks the tape in reverse
creation order (which is a topological order) and accumulates gradients by
summation over all paths.

Outside a tape nothing is recorded, so inference pays no bookkeeping cost.
"""
from __future__ import annotations

import math
from contextvars import ContextVar
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "backward",
    "forward_op",
    "OPS",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "embed_lookup",
    "softmax",
    "log_softmax",
    "layer_norm",
    "relu",
    "gelu",
    "sigmoid",
    "log_sigmoid",
    "exp",
    "log",
    "concat",
    "slice_",
    "gather",
    "mean",
    "sum_",
    "reshape",
    "transpose",
    "minimum",
    "clip",
]

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("relsum_active_tape", default=None)


class Tensor:
    """Immutable n-dimensional array of 64-bit floats."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_grad_fn", "_op")

    def __init__(self, data: object, requires_grad: bool = False, name: str | None = None) -> None:
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self._op = "leaf"

    # -- Introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "only single-element tensors convert to float")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # -- Operator sugar --------------------------------------------------
    def __add__(self, other: object) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: object) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: object) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: object) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: object) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: object) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: object) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: object) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return slice_(self, index)


class Tape:
    """Records differentiable operations for one backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._grad_fn = None
        self.nodes.clear()

    def backward(
        self,
        loss: Tensor,
        params: Mapping[str, Tensor],
        *,
        retain_graph: bool = False,
    ) -> dict[str, Tensor]:
        """Return d(loss)/d(param) for every named parameter.

        Parameters the loss does not depend on receive zero gradients.
        """

        if loss.size != 1:
            raise ShapeError("backward", [loss.shape], "loss must be a scalar")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node), None)
            if upstream is None or node._grad_fn is None:
                continue
            for parent, parent_grad in zip(node._parents, node._grad_fn(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

        result: dict[str, Tensor] = {}
        for name, param in params.items():
            grad = grads.get(id(param))
            if grad is None:
                grad = np.zeros_like(param.data)
            result[name] = Tensor(grad, name=name)

        if not retain_graph:
            self.clear()
        return result


def backward(loss: Tensor, params: Mapping[str, Tensor], tape: Tape | None = None) -> dict[str, Tensor]:
    """Backpropagate ``loss`` through ``tape`` (default: the active tape)."""

    tape = tape or _ACTIVE_TAPE.get()
    if tape is None:
        raise ValueError("backward: no tape recorded the loss; wrap the forward pass in `with Tape():`")
    return tape.backward(loss, params)


# -- Helpers -------------------------------------------------------------
def as_tensor(value: object) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"{op}: non-finite value in input of shape {tuple(array.shape)}")


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    # op outputs are fresh arrays; wrap without copying
    out = Tensor.__new__(Tensor)
    array = np.asarray(data, dtype=np.float64)
    array.flags.writeable = False
    out.data = array
    out.requires_grad = False
    out.name = None
    out._parents = ()
    out._grad_fn = None
    out._op = op
    if any(parent.requires_grad for parent in parents):
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
            tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(op, [a.shape, b.shape]) from exc


# -- Elementwise binary ops ----------------------------------------------
def add(a: object, b: object) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", a.data, b.data)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


def sub(a: object, b: object) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: object, b: object) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), grad_fn)


def div(a: object, b: object) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    _check_finite("div", a.data, b.data)
    if np.any(b.data == 0.0):
        raise NonFiniteError("div: division by zero")

    def grad_fn(g: np.ndarray):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make("div", a.data / b.data, (a, b), grad_fn)


def neg(a: object) -> Tensor:
    a = as_tensor(a)
    _check_finite("neg", a.data)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def minimum(a: object, b: object) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""

    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    _check_finite("minimum", a.data, b.data)
    pick_a = a.data <= b.data

    def grad_fn(g: np.ndarray):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b), grad_fn)


# -- Linear algebra ------------------------------------------------------
def matmul(a: object, b: object) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError("matmul", [a.shape, b.shape], "batch dimensions differ") from exc
    _check_finite("matmul", a.data, b.data)

    def grad_fn(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), grad_fn)


def embed_lookup(table: Tensor, ids: np.ndarray | Sequence[int]) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""

    index = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embed_lookup", [table.shape, index.shape], "table must be 2-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError("embed_lookup", [table.shape, index.shape], "token id out of range")
    _check_finite("embed_lookup", table.data)

    def grad_fn(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make("embed_lookup", table.data[index], (table,), grad_fn)


# -- Normalisation and activations ---------------------------------------
def softmax(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _make("softmax", probs, (x,), grad_fn)


def log_softmax(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("log_softmax", x.data)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm

    def grad_fn(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), grad_fn)


def layer_norm(x: object, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError("layer_norm", [x.shape, gamma.shape, beta.shape])
    _check_finite("layer_norm", x.data, gamma.data, beta.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def grad_fn(g: np.ndarray):
        reduce_axes = tuple(range(g.ndim - 1))
        grad_gamma = (g * x_hat).sum(axis=reduce_axes)
        grad_beta = g.sum(axis=reduce_axes)
        d_hat = g * gamma.data
        grad_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return _make("layer_norm", x_hat * gamma.data + beta.data, (x, gamma, beta), grad_fn)


def relu(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("relu", x.data)
    active = x.data > 0
    return _make("relu", np.where(active, x.data, 0.0), (x,), lambda g: (np.where(active, g, 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: object) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite differences agree everywhere."""

    x = as_tensor(x)
    _check_finite("gelu", x.data)
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def grad_fn(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _make("gelu", out, (x,), grad_fn)


def _stable_sigmoid(values: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("sigmoid", x.data)
    out = _stable_sigmoid(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("log_sigmoid", x.data)
    out = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))
    return _make("log_sigmoid", out, (x,), lambda g: (g * (1.0 - _stable_sigmoid(x.data)),))


def exp(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("exp", x.data)
    out = np.exp(x.data)
    _check_finite("exp", out)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: object) -> Tensor:
    x = as_tensor(x)
    _check_finite("log", x.data)
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: object, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    _check_finite("clip", x.data)
    inside = (x.data >= low) & (x.data <= high)
    return _make("clip", np.clip(x.data, low, high), (x,), lambda g: (np.where(inside, g, 0.0),))


# -- Structural ops ------------------------------------------------------
def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat", [], "nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", [p.shape for p in parts]) from exc
    _check_finite("concat", *(p.data for p in parts))
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(parts), grad_fn)


def slice_(x: object, index: object) -> Tensor:
    """Slice or boolean-mask indexing; the gradient scatters back into zeros."""

    x = as_tensor(x)
    _check_finite("slice", x.data)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError("slice", [x.shape], str(exc)) from exc

    def grad_fn(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[index] += g
        return (grad,)

    return _make("slice", out, (x,), grad_fn)


def gather(x: object, ids: np.ndarray | Sequence[int]) -> Tensor:
    """Pick ``x[..., ids[...]]`` along the last axis (e.g. token log-probs)."""

    x = as_tensor(x)
    index = np.asarray(ids, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError("gather", [x.shape, index.shape], "index must match leading dimensions")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise ShapeError("gather", [x.shape, index.shape], "index out of range")
    _check_finite("gather", x.data)
    expanded = index[..., None]

    def grad_fn(g: np.ndarray):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, expanded, g[..., None], axis=-1)
        return (grad,)

    return _make("gather", np.take_along_axis(x.data, expanded, axis=-1)[..., 0], (x,), grad_fn)


def sum_(x: object, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("sum", x.data)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), grad_fn)


def mean(x: object, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("mean", x.data)
    if x.size == 0:
        raise ShapeError("mean", [x.shape], "mean of an empty tensor")
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(out.size, 1)

    def grad_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", out, (x,), grad_fn)


def reshape(x: object, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError("reshape", [x.shape, tuple(shape)]) from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: object, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", [x.shape], f"bad axes {axes}")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "embed_lookup": embed_lookup,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "exp": exp,
    "log": log,
    "concat": concat,
    "slice": slice_,
    "gather": gather,
    "mean": mean,
    "sum": sum_,
    "reshape": reshape,
    "transpose": transpose,
    "minimum": minimum,
    "clip": clip,
}


def forward_op(kind: str, *inputs: object, **kwargs: object) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("softmax", x)``."""

    try:
        op = OPS[kind]
    except KeyError as exc:
        raise ValueError(f"Unknown op '{kind}'; expected one of {sorted(OPS)}") from exc
    return op(*inputs, **kwargs)
