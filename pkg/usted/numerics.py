"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a `Tape` is active on the
current thread, every operation with at least one gradient-carrying input
is recorded; `backward` replays the records in exact reverse order.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = total(w * w)
    >>> backward(loss, {"w": w})["w"]
    array([2., 4.])
"""

import logging
import threading
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class NumericsError(ValueError):
    """Base class for tensor arithmetic failures."""


class ShapeError(NumericsError):
    """Operand shapes do not fit the operation."""


class NonFiniteError(NumericsError):
    """An operation produced or received NaN/inf."""


class Node(NamedTuple):
    tape: "Tape"
    index: int


class Tensor:
    """
    Real-valued N-dimensional array.

    `requires_grad` marks parameters (leaves that receive gradients); outputs of
    recorded operations carry a `node` pointing at their tape record.
    """

    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def parameter(cls, data: ArrayLike, name: Optional[str] = None) -> "Tensor":
        return cls(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


# ---------------------------------------------------------------------------- #
#                                     Tape                                     #
# ---------------------------------------------------------------------------- #
_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of operations for one forward pass.

    Recording order is a topological order of the graph; use one tape per
    training step.
    """

    def __init__(self):
        self.records: List[Tuple["Function", Tensor]] = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _local.tapes.pop()
        return False

    def record(self, fn: "Function", out: Tensor) -> None:
        out.node = Node(self, len(self.records))
        out.requires_grad = True
        self.records.append((fn, out))

    def gradients(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Adjoints of every tensor reachable from `loss`, keyed by `id(tensor)`."""
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for fn, out in reversed(self.records[:loss.node.index + 1]):
            grad = grads.pop(id(out), None)
            if grad is None:
                continue
            for inp, inp_grad in zip(fn.inputs, fn.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + inp_grad if key in grads else inp_grad
        return grads


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """
    Gradient of a scalar `loss` with respect to each named parameter.

    Parameters not on a path to the loss receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return {name: np.zeros_like(p.data) for name, p in params.items()}

    grads = loss.node.tape.gradients(loss)
    logger.debug("backward over %d recorded operations", loss.node.index + 1)
    return {name: grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for name, p in params.items()}


# ---------------------------------------------------------------------------- #
#                                   Functions                                  #
# ---------------------------------------------------------------------------- #
class Function:
    """
    A differentiable operation.

    `forward` receives the input arrays; `backward` maps the output gradient
    to one gradient per input (or None when an input needs none).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        for t in inputs:
            if not isinstance(t, Tensor):
                raise TypeError(f"{cls.__name__} expects Tensor inputs, got {type(t).__name__}")
        fn = cls(*inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            tape.record(fn, out)
        return out


def _require_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name}: non-finite value in result")
    return array


class MatMul(Function):
    def forward(self, a, b):
        if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        if a.ndim == 2:
            return grad @ b.T, a.T @ grad
        flat_a = a.reshape(-1, a.shape[-1])
        flat_g = grad.reshape(-1, grad.shape[-1])
        return grad @ b.T, flat_a.T @ flat_g


class Add(Function):
    """Elementwise sum; the right operand may also be a bias row broadcast over leading axes."""

    def forward(self, a, b):
        self.bias = a.shape != b.shape
        if self.bias and not (b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]):
            raise ShapeError(f"add: shape mismatch {a.shape} + {b.shape}")
        self.b_shape = b.shape
        return a + b

    def backward(self, grad):
        if not self.bias:
            return grad, grad
        return grad, grad.reshape(-1, self.b_shape[0]).sum(axis=0)


class Sub(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"sub: shape mismatch {a.shape} - {b.shape}")
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} * {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, x, factor: float = 1.0):
        self.factor = float(factor)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Tanh(Function):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Sigmoid(Function):
    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Exp(Function):
    def forward(self, x):
        with np.errstate(over="ignore"):
            self.y = _require_finite("exp", np.exp(x))
        return self.y

    def backward(self, grad):
        return (grad * self.y,)


class Log(Function):
    def forward(self, x):
        if np.any(x <= 0) or not np.all(np.isfinite(x)):
            raise NonFiniteError("log: argument must be finite and strictly positive")
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Softmax(Function):
    """Normalized exponentials along `axis`; positions where `mask` is False get exactly zero."""

    def forward(self, x, axis: int = -1, mask: Optional[np.ndarray] = None):
        _require_finite("softmax input", x)
        self.axis = axis
        if mask is None:
            shifted = x - x.max(axis=axis, keepdims=True)
            e = np.exp(shifted)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != x.shape:
                raise ShapeError(f"softmax: mask shape {mask.shape} does not match input {x.shape}")
            if not np.all(mask.any(axis=axis)):
                raise NumericsError("softmax: all positions masked")
            peak = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
            e = np.where(mask, np.exp(np.where(mask, x - peak, 0.0)), 0.0)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis: int = -1):
        _require_finite("log_softmax input", x)
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        self.y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.y

    def backward(self, grad):
        return (grad - np.exp(self.y) * grad.sum(axis=self.axis, keepdims=True),)


class EmbeddingLookup(Function):
    def forward(self, table, ids=None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if table.ndim != 2:
            raise ShapeError(f"embedding_lookup: table must be 2-D, got shape {table.shape}")
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        if bad.size:
            raise NumericsError(f"embedding_lookup: id {int(bad[0])} out of range for table with {table.shape[0]} rows")
        self.ids, self.table_shape = ids, table.shape
        return table[ids]

    def backward(self, grad):
        out = np.zeros(self.table_shape)
        np.add.at(out, self.ids, grad)
        return (out,)


class Pick(Function):
    """Row-wise gather: out[b] = x[b, ids[b]]."""

    def forward(self, x, ids=None):
        ids = np.asarray(ids, dtype=np.int64)
        if x.ndim != 2 or ids.shape != (x.shape[0],):
            raise ShapeError(f"pick: need x[B, V] and ids[B], got {x.shape} and {ids.shape}")
        if np.any((ids < 0) | (ids >= x.shape[1])):
            raise NumericsError(f"pick: id out of range for width {x.shape[1]}")
        self.ids, self.shape = ids, x.shape
        return x[np.arange(x.shape[0]), ids]

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[np.arange(self.shape[0]), self.ids] = grad
        return (out,)


class Total(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.shape, float(grad)),)


class Concat(Function):
    def forward(self, *arrays, axis: int = -1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise ShapeError(f"concat: {[a.shape for a in arrays]} along axis {axis}: {e}") from e

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        try:
            return np.stack(arrays, axis=axis)
        except ValueError as e:
            raise ShapeError(f"stack: {[a.shape for a in arrays]}: {e}") from e

    def backward(self, grad):
        return tuple(np.moveaxis(grad, self.axis, 0))


class TakeCols(Function):
    def forward(self, x, start: int = 0, stop: int = 0):
        if not 0 <= start <= stop <= x.shape[-1]:
            raise ShapeError(f"take_cols: [{start}:{stop}] outside last axis of {x.shape}")
        self.shape, self.start, self.stop = x.shape, start, stop
        return x[..., start:stop]

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[..., self.start:self.stop] = grad
        return (out,)


class Transpose(Function):
    def forward(self, x):
        if x.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
        return x.T

    def backward(self, grad):
        return (grad.T,)


class LSTMCell(Function):
    """
    One LSTM step for a batch; returns [h' | c'] as a single [B, 2H] block.

    Gate order in the fused weights is input, forget, cell, output.
    """

    def forward(self, x, h, c, w_x, w_h, b):
        units = h.shape[-1]
        if w_x.shape != (x.shape[-1], 4 * units) or w_h.shape != (units, 4 * units) or b.shape != (4 * units,):
            raise ShapeError(
                f"lstm_cell: x{x.shape} h{h.shape} w_x{w_x.shape} w_h{w_h.shape} b{b.shape} are inconsistent"
            )
        if c.shape != h.shape or x.shape[0] != h.shape[0]:
            raise ShapeError(f"lstm_cell: state shapes h{h.shape} c{c.shape} x{x.shape} disagree")
        z = x @ w_x + h @ w_h + b
        self.i = _sigmoid(z[:, :units])
        self.f = _sigmoid(z[:, units:2 * units])
        self.g = np.tanh(z[:, 2 * units:3 * units])
        self.o = _sigmoid(z[:, 3 * units:])
        c_next = self.f * c + self.i * self.g
        self.tc = np.tanh(c_next)
        self.x, self.h, self.c, self.w_x, self.w_h = x, h, c, w_x, w_h
        self.units = units
        return np.concatenate([self.o * self.tc, c_next], axis=1)

    def backward(self, grad):
        units = self.units
        gh, gc = grad[:, :units], grad[:, units:]
        d_o = gh * self.tc
        d_c = gc + gh * self.o * (1.0 - self.tc * self.tc)
        dz = np.concatenate([
            d_c * self.g * self.i * (1.0 - self.i),
            d_c * self.c * self.f * (1.0 - self.f),
            d_c * self.i * (1.0 - self.g * self.g),
            d_o * self.o * (1.0 - self.o),
        ], axis=1)
        return (
            dz @ self.w_x.T,
            dz @ self.w_h.T,
            d_c * self.f,
            self.x.T @ dz,
            self.h.T @ dz,
            dz.sum(axis=0),
        )


class AdditiveScore(Function):
    """e[b, n] = v . tanh(keys[b, n] + query[b])"""

    def forward(self, keys, query, v):
        if keys.ndim != 3 or query.shape != (keys.shape[0], keys.shape[2]) or v.shape != (keys.shape[2], 1):
            raise ShapeError(f"additive_score: keys{keys.shape} query{query.shape} v{v.shape} are inconsistent")
        self.t = np.tanh(keys + query[:, None, :])
        self.v = v
        return (self.t @ v)[..., 0]

    def backward(self, grad):
        d_pre = grad[..., None] * self.v[:, 0] * (1.0 - self.t * self.t)
        d_v = np.einsum("bna,bn->a", self.t, grad)[:, None]
        return d_pre, d_pre.sum(axis=1), d_v


class WeightedSum(Function):
    """out[b] = sum_n w[b, n] * values[b, n]"""

    def forward(self, w, values):
        if values.ndim != 3 or w.shape != values.shape[:2]:
            raise ShapeError(f"weighted_sum: weights{w.shape} values{values.shape} are inconsistent")
        self.w, self.values = w, values
        return np.einsum("bn,bnd->bd", w, values)

    def backward(self, grad):
        return np.einsum("bd,bnd->bn", grad, self.values), self.w[:, :, None] * grad[:, None, :]


# ---------------------------------------------------------------------------- #
#                                   Operators                                  #
# ---------------------------------------------------------------------------- #
def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Apply one of add, sub, mul (binary) or tanh, sigmoid, exp, log (unary) by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*operands)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return Softmax.apply(x, axis=axis, mask=mask)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    return EmbeddingLookup.apply(table, ids=ids)


def pick(x: Tensor, ids: Sequence[int]) -> Tensor:
    return Pick.apply(x, ids=ids)


def total(x: Tensor) -> Tensor:
    return Total.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    return TakeCols.apply(x, start=start, stop=stop)


def transpose(x: Tensor) -> Tensor:
    return Transpose.apply(x)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    hc = LSTMCell.apply(x, h, c, w_x, w_h, b)
    units = h.shape[-1]
    return take_cols(hc, 0, units), take_cols(hc, units, 2 * units)


def additive_score(keys: Tensor, query: Tensor, v: Tensor) -> Tensor:
    return AdditiveScore.apply(keys, query, v)


def weighted_sum(w: Tensor, values: Tensor) -> Tensor:
    return WeightedSum.apply(w, values)


# ---------------------------------------------------------------------------- #
#                               Gradient checking                              #
# ---------------------------------------------------------------------------- #
def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable[[Tensor], Tensor], point: ArrayLike, eps: float = 1e-5) -> float:
    """
    Largest coordinatewise relative error between `backward` and central differences.

    `f` maps a tensor to a scalar tensor; it is evaluated once under a tape and
    twice per coordinate without one.
    """
    x = Tensor.parameter(point)
    with Tape():
        y = f(x)
    analytic = backward(y, {"x": x})["x"]

    numeric = np.zeros_like(x.data)
    for idx in np.ndindex(*x.shape):
        saved = x.data[idx]
        x.data[idx] = saved + eps
        upper = f(x).item()
        x.data[idx] = saved - eps
        lower = f(x).item()
        x.data[idx] = saved
        numeric[idx] = (upper - lower) / (2.0 * eps)
    return float(relative_error(analytic, numeric).max()) if x.size else 0.0


class GradCheckReport(NamedTuple):
    max_relative_error: float
    per_parameter: Dict[str, float]
    coordinates: int


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    coords_per_tensor: int = 4,
) -> GradCheckReport:
    """
    Finite-difference check of `backward` over named parameters.

    Every tensor is checked at the `coords_per_tensor` coordinates with the
    largest analytic gradient magnitude (ties by flat index);
    `coords_per_tensor <= 0` checks every coordinate.
    """
    with Tape():
        loss = loss_fn()
    analytic = backward(loss, params)

    per_parameter: Dict[str, float] = {}
    checked = 0
    for name in sorted(params):
        p = params[name]
        if p.size == 0:
            continue
        flat_grad = analytic[name].reshape(-1)
        order = np.argsort(-np.abs(flat_grad), kind="stable")
        if coords_per_tensor > 0:
            order = order[:coords_per_tensor]
        worst = 0.0
        flat = p.data.reshape(-1)
        for k in order:
            saved = flat[k]
            flat[k] = saved + eps
            upper = loss_fn().item()
            flat[k] = saved - eps
            lower = loss_fn().item()
            flat[k] = saved
            numeric = (upper - lower) / (2.0 * eps)
            worst = max(worst, float(relative_error(np.array(flat_grad[k]), np.array(numeric))))
            checked += 1
        per_parameter[name] = worst
    overall = max(per_parameter.values(), default=0.0)
    return GradCheckReport(overall, per_parameter, checked)
