"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward()`` linearizes the recorded graph in reverse
topological order and accumulates gradients into every reachable tensor
with ``requires_grad=True``. Gradients from multiple uses of the same
tensor add up.

Design constraints, fixed on purpose:

* float64 everywhere — the sizes here are tiny and the gradient-check
  tolerances are tight, so precision beats speed.
* dense row-major storage, no views or strides;
* broadcasting only between a scalar (size-1 tensor or Python number)
  and a tensor, plus the explicit row-vector case in :func:`add_bias`;
* the relu subgradient at 0 is 0.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, NumericError, OracleError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "add_bias",
    "softmax",
    "log_softmax",
    "finite_diff_gradient",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / constants)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_tensor(value) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _is_scalar_shaped(a: np.ndarray) -> bool:
    return a.size == 1


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping.

    ``grad`` is an ndarray of the same shape once a backward pass has
    reached this tensor, and ``None`` otherwise.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, severed from the graph (stop-gradient)."""
        out = Tensor(self.data)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ------------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Iterable["Tensor"], op: str,
              backward: Callable[[], None]) -> "Tensor":
        out = Tensor(data)
        out._op = op
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def _accumulate(t: "Tensor", g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = g.copy() if g.shape == t.data.shape else np.broadcast_to(g, t.data.shape).copy()
        else:
            t.grad = t.grad + g

    def backward(self) -> None:
        """Run reverse-mode differentiation from this scalar.

        The recorded operations are linearized so that every operation
        appears after the operations producing its inputs (reverse DFS
        postorder), then their backward closures run in reverse.
        """
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- elementwise and linear operations ------------------------------------

    def _binary_shapes(self, other: "Tensor", op: str) -> None:
        a, b = self.data, other.data
        if a.shape != b.shape and not (_is_scalar_shaped(a) or _is_scalar_shaped(b)):
            raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not match")

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        self._binary_shapes(other, "add")
        out_data = self.data + other.data

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, _reduce_to(g, self.data.shape))
            Tensor._accumulate(other, _reduce_to(g, other.data.shape))

        out = Tensor._make(out_data, (self, other), "add", backward)
        return out

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        self._binary_shapes(other, "sub")
        out_data = self.data - other.data

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, _reduce_to(g, self.data.shape))
            Tensor._accumulate(other, _reduce_to(-g, other.data.shape))

        out = Tensor._make(out_data, (self, other), "sub", backward)
        return out

    def __mul__(self, other) -> "Tensor":
        """Hadamard product for equal shapes, scalar scaling otherwise."""
        other = _as_tensor(other)
        self._binary_shapes(other, "mul")
        out_data = self.data * other.data

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, _reduce_to(g * other.data, self.data.shape))
            Tensor._accumulate(other, _reduce_to(g * self.data, other.data.shape))

        out = Tensor._make(out_data, (self, other), "mul", backward)
        return out

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __radd__(self, other) -> "Tensor":
        return _as_tensor(other).__add__(self)

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other).__sub__(self)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul: needs 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
        out_data = a @ b

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, g @ other.data.T)
            Tensor._accumulate(other, self.data.T @ g)

        out = Tensor._make(out_data, (self, other), "matmul", backward)
        return out

    def relu(self) -> "Tensor":
        """max(0, x); the subgradient at exactly 0 is taken as 0."""
        out_data = np.maximum(self.data, 0.0)

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, g * (self.data > 0.0))

        out = Tensor._make(out_data, (self,), "relu", backward)
        return out

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, g * (1.0 - out_data * out_data))

        out = Tensor._make(out_data, (self,), "tanh", backward)
        return out

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, g * out_data)

        out = Tensor._make(out_data, (self,), "exp", backward)
        return out

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, g / self.data)

        out = Tensor._make(out_data, (self,), "log", backward)
        return out

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum())

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, np.full_like(self.data, float(g)))

        out = Tensor._make(out_data, (self,), "sum", backward)
        return out

    def mean(self) -> "Tensor":
        out_data = np.asarray(self.data.mean())
        n = self.data.size

        def backward():
            g = out._grad_or_zero()
            Tensor._accumulate(self, np.full_like(self.data, float(g) / n))

        out = Tensor._make(out_data, (self,), "mean", backward)
        return out

    def _grad_or_zero(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a broadcast gradient back onto a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-h row vector to every row of an (n, h) matrix.

    This is the one sanctioned non-scalar broadcast; the bias gradient
    is the column sum of the upstream gradient.
    """
    x = _as_tensor(x)
    b = _as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: expected (n, h) and (h,), got {x.shape} and {b.shape}")
    out_data = x.data + b.data

    def backward():
        g = out._grad_or_zero()
        Tensor._accumulate(x, g)
        Tensor._accumulate(b, g.sum(axis=0))

    out = Tensor._make(out_data, (x, b), "add_bias", backward)
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Probability simplex along ``axis``, computed with max-subtraction."""
    t = _as_tensor(t)
    _check_axis(t, axis, "softmax")
    if not np.isfinite(t.data).all():
        raise NumericError("softmax: input contains non-finite values")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out._grad_or_zero()
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        Tensor._accumulate(t, out_data * (g - inner))

    out = Tensor._make(out_data, (t,), "softmax", backward)
    return out


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(t)) via the shifted log-sum-exp; always finite."""
    t = _as_tensor(t)
    _check_axis(t, axis, "log_softmax")
    if not np.isfinite(t.data).all():
        raise NumericError("log_softmax: input contains non-finite values")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward():
        g = out._grad_or_zero()
        Tensor._accumulate(t, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    out = Tensor._make(out_data, (t,), "log_softmax", backward)
    return out


def _check_axis(t: Tensor, axis: int, op: str) -> None:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {t.shape}")


def finite_diff_gradient(f: Callable[[Tensor], float], x: Tensor,
                         h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    ``f`` must be deterministic; this is checked by evaluating it twice
    at ``x`` and comparing bit-for-bit.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_gradient: step must be positive, got {h}")

    def evaluate(values: np.ndarray) -> float:
        result = f(Tensor(values))
        if isinstance(result, Tensor):
            return result.item()
        return float(result)

    base = x.data.copy()
    if evaluate(base) != evaluate(base):
        raise OracleError("finite_diff_gradient: f is not deterministic at x")

    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return Tensor(grad)
