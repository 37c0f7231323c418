# stotrans/engine/tensor.py
"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active ``Tape`` context are recorded together
with their backward rule; outside a tape nothing is recorded, which is how
inference runs. Tapes are thread-local, so independent training or inference
runs may execute in separate threads.
"""

import logging
import math
import threading
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from stotrans.errors import ContractError, NumericalError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def parameter(cls, data) -> "Tensor":
        return cls(data, requires_grad=True)

    @classmethod
    def _result(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward_fn: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        _check_finite(out.data, op)
        out.grad = None
        out._tape = None
        tape = active_tape()
        out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            tape.record(out, inputs, backward_fn, op)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar: float):
        return div(self, scalar)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node(NamedTuple):
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: BackwardFn
    op: str


class Tape:
    """
    Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the record is topological.
    A tape supports exactly one backward pass; a second call is an error
    rather than a silent accumulation.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> None:
        if self.consumed:
            raise ContractError("cannot record onto a tape that already ran backward")
        output._tape = self
        self._nodes.append(_Node(output, tuple(inputs), backward_fn, op))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("backward already ran on this tape; gradients are never accumulated")
        if loss._tape is not self:
            raise ContractError("loss is not reachable from this tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}

        for node in reversed(self._nodes):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            for inp, grad_in in zip(node.inputs, node.backward_fn(grad_out)):
                if grad_in is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    grads[key] = grads[key] + grad_in if key in grads else grad_in
                elif inp._tape is None:
                    key = id(inp)
                    if key in leaf_grads:
                        leaf_grads[key] = (inp, leaf_grads[key][1] + grad_in)
                    else:
                        leaf_grads[key] = (inp, grad_in)

        stale = [t for t, _ in leaf_grads.values() if t.grad is not None]
        if stale:
            raise ContractError(
                f"{len(stale)} leaf tensor(s) still hold gradients from an earlier pass; reset them first"
            )
        for tensor, grad in leaf_grads.values():
            tensor.grad = np.array(grad, dtype=np.float64).reshape(tensor.shape)

        logger.debug(f"Backward pass over {len(self._nodes)} recorded ops, {len(leaf_grads)} leaves")
        self.consumed = True
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-tracked leaf reachable from ``loss``."""
    if loss._tape is None:
        raise ContractError("loss was not recorded on any tape")
    loss._tape.backward(loss)


# --- helpers ---

def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_shape(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    if a_shape == b_shape:
        return a_shape
    longer, shorter = (a_shape, b_shape) if len(a_shape) >= len(b_shape) else (b_shape, a_shape)
    if longer[len(longer) - len(shorter):] != shorter:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} differ outside the leading dimensions")
    return longer


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# --- elementwise ---

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    a_shape, b_shape = a.shape, b.shape

    def _backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return Tensor._result(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    a_shape, b_shape = a.shape, b.shape

    def _backward(g):
        return _unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)

    return Tensor._result(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    a_data, b_data = a.data, b.data

    def _backward(g):
        grad_a = _unbroadcast(g * b_data, a_data.shape) if a.requires_grad else None
        grad_b = _unbroadcast(g * a_data, b_data.shape) if b.requires_grad else None
        return grad_a, grad_b

    return Tensor._result(a_data * b_data, (a, b), _backward, "mul")


def div(x: Tensor, scalar: float) -> Tensor:
    if isinstance(scalar, Tensor) or scalar == 0:
        raise ParameterError("division is defined only by a non-zero scalar")
    return Tensor._result(x.data / scalar, (x,), lambda g: (g / scalar,), "div")


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return Tensor._result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


# --- linear algebra and layout ---

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree for shapes {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    a_data, b_data = a.data, b.data

    def _backward(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape) if a.requires_grad else None
        grad_b = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape) if b.requires_grad else None
        return grad_a, grad_b

    return Tensor._result(np.matmul(a_data, b_data), (a, b), _backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return Tensor._result(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(original),), "reshape")


# --- reductions ---

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor._result(np.mean(x.data), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def masked_mean(x: Tensor, keep: np.ndarray) -> Tensor:
    """Mean over axis 1 of a (batch, length, dim) tensor, counting only ``keep`` positions."""
    weights = np.asarray(keep, dtype=np.float64)
    if weights.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: mask shape {weights.shape} does not match {x.shape[:2]}")
    counts = weights.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("masked_mean: a sequence has no unmasked positions")
    scale = (weights / counts[:, None])[..., None]

    def _backward(g):
        return (g[:, None, :] * scale,)

    return Tensor._result((x.data * scale).sum(axis=1), (x,), _backward, "masked_mean")


# --- normalisation ---

def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """softmax(x / temperature) along ``axis`` with max-subtraction."""
    if not (temperature > 0 and math.isfinite(temperature)):
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._result(y, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(y)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), _backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    gamma_data = gamma.data

    def _backward(g):
        dxhat = g * gamma_data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma_data.shape), _unbroadcast(g, gamma_data.shape)

    return Tensor._result(xhat * gamma_data + beta.data, (x, gamma, beta), _backward, "layer_norm")


# --- indexing ---

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")
    rows = table.shape

    def _backward(g):
        grad = np.zeros(rows)
        np.add.at(grad, ids, g)
        return (grad,)

    return Tensor._result(table.data[ids], (table,), _backward, "embedding")


def select(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[i, index[i]]`` from a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"select needs a 2-D tensor and one index per row, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def _backward(g):
        grad = np.zeros(shape)
        grad[rows, index] = g
        return (grad,)

    return Tensor._result(x.data[rows, index], (x,), _backward, "select")


# --- stochastic regularisation ---

def dropout(x: Tensor, rate: float, active: bool, rng) -> Tensor:
    """Inverted dropout; returns ``x`` itself when inactive or when rate is zero."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    scale = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")
