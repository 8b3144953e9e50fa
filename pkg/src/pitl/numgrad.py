"""Dense 2-D arrays with tape-based reverse-mode differentiation.

Every operation takes and returns :class:`Tensor2D`.  While a :class:`Tape`
is active (``with Tape() as tape:``) each operation whose inputs require
gradients appends a node to the tape; ``tape.backward(loss)`` then sweeps the
nodes in reverse order and accumulates gradients into ``.grad``.

Outside a tape the same functions are plain numpy evaluations, which is what
inference and metric evaluation use.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("pitl_tape", default=None)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of a tape (double backward, non-scalar loss, ...)."""


class GradCheckError(ArithmeticError):
    """The checked function produced a non-finite value."""


class Tensor2D:
    """A row-major matrix of doubles, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")
    # numpy must defer to our reflected operators (ndarray * Tensor2D)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor2D needs at most 2 dimensions, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor2D:
        # internal fast path, arr is already a float64 2-D array
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = requires_grad
        return out

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants may be Python scalars or same-shape arrays
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor2D):
    """A trainable leaf. ``frozen`` only affects optimizer updates."""

    __slots__ = ("frozen", "name")

    def __init__(self, data, frozen: bool = False, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.frozen = frozen
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, frozen={self.frozen})"


@dataclass
class _Node:
    out: Tensor2D
    inputs: tuple[Tensor2D, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    nodes: list[_Node] = field(default_factory=list)
    swept: bool = False
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor2D) -> None:
        """Reverse sweep from a 1x1 ``loss``; gradients add into ``.grad``."""
        if self.swept:
            raise TapeError("backward already ran on this tape; record a new forward pass first")
        if loss.shape != (1, 1):
            raise TapeError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        self.swept = True
        if not loss.requires_grad:
            return
        # intermediates get fresh grads; Params accumulate
        seed = np.ones((1, 1))
        if isinstance(loss, Param):
            loss.grad += seed
        else:
            loss.grad = seed
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                elif isinstance(inp, Param):
                    inp.grad += gi
                else:
                    inp.grad = inp.grad + gi
        # drop references to intermediate arrays
        for node in self.nodes:
            if not isinstance(node.out, Param):
                node.out.grad = None
        self.nodes.clear()


def _record(out_arr: np.ndarray, inputs: tuple[Tensor2D, ...], backward) -> Tensor2D:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor2D._wrap(out_arr, needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def as_tensor(x) -> Tensor2D:
    return x if isinstance(x, Tensor2D) else Tensor2D(x)


def _same_shape(a: Tensor2D, b: Tensor2D, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor2D) and np.ndim(x) == 0


def ew_add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _same_shape(a, b, "ew_add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def ew_mul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _same_shape(a, b, "ew_mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def add(a, b) -> Tensor2D:
    """Element-wise ``a + b``; either side may be a scalar or array constant."""
    if not isinstance(a, Tensor2D):
        a, b = b, a
    if _is_scalar(b):
        return add_const(a, float(b))
    return ew_add(a, as_tensor(b))


def sub(a, b) -> Tensor2D:
    if _is_scalar(b):
        return add_const(as_tensor(a), -float(b))
    if _is_scalar(a):
        return add_const(scale(b, -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor2D:
    if not isinstance(a, Tensor2D):
        a, b = b, a
    if _is_scalar(b):
        return scale(a, float(b))
    return ew_mul(a, as_tensor(b))


def div(a, b) -> Tensor2D:
    """Element-wise ``a / b``."""
    if not isinstance(b, Tensor2D):
        if np.ndim(b) == 0:
            return scale(a, 1.0 / float(b))
        b = as_tensor(b)
    if not isinstance(a, Tensor2D):
        a = Tensor2D(np.broadcast_to(np.asarray(a, dtype=np.float64), b.data.shape))
    _same_shape(a, b, "div")
    A, B = a.data, b.data
    out = A / B
    return _record(out, (a, b), lambda g: (g / B, -g * out / B))


def scale(a: Tensor2D, c: float) -> Tensor2D:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor2D, c: float) -> Tensor2D:
    return _record(a.data + c, (a,), lambda g: (g,))


def add_row(a: Tensor2D, row: Tensor2D) -> Tensor2D:
    """Add a 1 x n row (a bias) to every row of ``a``."""
    if row.data.shape[0] != 1 or row.data.shape[1] != a.data.shape[1]:
        raise DimensionError(f"add_row: cannot broadcast {row.shape} over {a.shape}")
    return _record(a.data + row.data, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)))


def sigmoid(x: Tensor2D) -> Tensor2D:
    # tanh form is overflow-free for any finite input
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh_act(x: Tensor2D) -> Tensor2D:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def identity_act(x: Tensor2D) -> Tensor2D:
    return x


def relu(x: Tensor2D) -> Tensor2D:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x: Tensor2D) -> Tensor2D:
    X = x.data
    return _record(X * X, (x,), lambda g: (2.0 * g * X,))


def total(x: Tensor2D) -> Tensor2D:
    """Sum of all entries as a 1x1 tensor."""
    shape = x.data.shape
    return _record(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean(x: Tensor2D) -> Tensor2D:
    n = x.data.size
    return scale(total(x), 1.0 / n)


def rows_slice(x: Tensor2D, start: int, stop: int) -> Tensor2D:
    shape = x.data.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record(x.data[start:stop], (x,), back)


ACTIVATIONS: dict[str, Callable[[Tensor2D], Tensor2D]] = {
    "tanh": tanh_act,
    "sigmoid": sigmoid,
    "identity": identity_act,
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def zero_grad(params: Sequence[Param]) -> None:
    for p in params:
        p.zero_grad()


def value_and_grad(f: Callable[[], Tensor2D], params: Sequence[Param]) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f`` on a fresh tape and return its gradients."""
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return loss.item(), [p.grad.copy() for p in params]


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(a, n))


def grad_check(
    f: Callable[[], Tensor2D],
    params: Sequence[Param],
    step: float = 1e-4,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` takes no arguments and must read the current parameter values, so
    it can be re-evaluated after each in-place perturbation.
    """
    _, analytic = value_and_grad(f, params)
    errors = []
    for p, ga in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = f().item()
            flat[k] = orig - step
            fm = f().item()
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"non-finite value perturbing {getattr(p, 'name', '')}[{k}]")
            num_flat[k] = (fp - fm) / (2.0 * step)
        errors.append(float(rel_error(ga, numeric).max()) if numeric.size else 0.0)
    return GradCheckReport(errors, tol)
