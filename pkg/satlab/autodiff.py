"""
Minimal reverse-mode differentiation over numpy arrays.

Each Tensor remembers its parents and a closure mapping the output gradient
to parent gradients. ``backward`` walks the recorded graph once, in reverse
topological order, and releases it as it goes. Parameters are leaf tensors
whose ``grad`` accumulates until ``zero_grad``.
"""

from __future__ import annotations

import contextlib
import dataclasses
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import loss as sat_loss
from .cnf import Batch, FactorGraph
from .errors import ShapeMismatchError

LEAKY_SLOPE = 0.01
PAIRNORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording on this thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _float_array(data) -> np.ndarray:
    array = np.asarray(data)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float32)
    return array


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
        op: str = "",
    ) -> None:
        self.data = _float_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward
        self._consumed = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatchError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("this graph was already consumed by a backward pass")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if node._backward is None:
                if grad is not None:
                    node.grad = grad if node.grad is None else node.grad + grad
                continue
            if grad is not None:
                for parent, parent_grad in zip(node._parents, node._backward(grad)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                    key = id(parent)
                    pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
            node._parents = ()
            node._backward = None
            node._consumed = True

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(_lift(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(_lift(other), neg(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _lift(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if id(parent) not in seen and parent.requires_grad:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if grad_enabled() and any(parent.requires_grad for parent in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul of {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def sparse_matmul(matrix: sp.spmatrix, x: Tensor, transpose: bool = False) -> Tensor:
    """Dense result of (matrix or matrix^T) @ x; gradients reuse the same pattern."""
    matrix = sp.csr_matrix(matrix)
    operator = matrix.T.tocsr() if transpose else matrix
    if operator.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"sparse {operator.shape} times dense {x.shape}")
    adjoint = operator.T.tocsr()
    out = np.asarray(operator @ x.data, dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (adjoint @ g,), "sparse_matmul")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.data.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data).astype(x.data.dtype, copy=False)
    return _make(out, (x,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis)

    def backward(g: np.ndarray):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray):
        pieces = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            pieces.append(g[tuple(index)])
        return pieces

    return _make(out, tuple(tensors), backward, "concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), backward, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), backward, "slice_cols")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "take_rows")


def stop_gradient(x: ArrayLike) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def grad_scale(x: Tensor, alpha: float) -> Tensor:
    """Forward identity; backward multiplies the gradient by (1 - alpha)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    keep = 1.0 - alpha
    return _make(x.data, (x,), lambda g: (g * keep,), "grad_scale")


def pairnorm(
    x: Tensor,
    segments: Optional[Sequence[int]] = None,
    scale: float = 1.0,
    eps: float = PAIRNORM_EPS,
) -> Tensor:
    """PairNorm (PN): center rows, rescale to mean squared row norm d*scale^2.

    ``segments`` are row offsets [0, ..., N]; each graph in a batch is
    normalized on its own rows only.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"pairnorm expects N x d input, got {x.shape}")
    rows, d = x.shape
    bounds = list(segments) if segments is not None else [0, rows]
    out = np.empty_like(x.data)
    saved = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        block = x.data[start:stop]
        if stop == start:
            saved.append((start, stop, block, 1.0))
            continue
        centered = block - block.mean(axis=0, keepdims=True)
        norm = np.sqrt(np.mean(np.sum(centered * centered, axis=1)) / d + eps)
        out[start:stop] = scale * centered / norm
        saved.append((start, stop, centered, norm))

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        for start, stop, centered, norm in saved:
            count = stop - start
            if count == 0:
                continue
            block = g[start:stop]
            inner = np.sum(block * centered)
            d_centered = (scale / norm) * (block - centered * inner / (norm * norm * count * d))
            grad[start:stop] = d_centered - d_centered.mean(axis=0, keepdims=True)
        return (grad,)

    return _make(out, (x,), backward, "pairnorm")


def clause_values(q: Tensor, graph: FactorGraph) -> Tensor:
    """Per-clause values of every query column (m x d), differentiable in q."""
    values = sat_loss.per_clause_losses(graph, q.data).astype(q.data.dtype)
    return _make(
        values,
        (q,),
        lambda g: (sat_loss.clause_gradient(graph, q.data, "clause_sum", weights=g),),
        "clause_values",
    )


def formula_log_loss(out: Tensor, batch: Batch) -> Tensor:
    """Per-instance, per-column log losses (k x u, float64)."""
    losses = sat_loss.instance_log_losses(batch, out.data)
    owner = np.repeat(np.arange(batch.size), np.diff(batch.clause_offsets))

    def backward(g: np.ndarray):
        weights = np.asarray(g, dtype=np.float64)[owner]
        return (sat_loss.clause_gradient(batch.graph, out.data, "log", weights=weights),)

    return _make(losses, (out,), backward, "formula_log_loss")


@dataclasses.dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros for a parameter the loss never reached."""
        if self.tensor.grad is None:
            return np.zeros_like(self.tensor.data)
        return self.tensor.grad


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_mlp(widths: Sequence[int], rng: np.random.Generator, prefix: str) -> List[Parameter]:
    """Glorot-uniform weights (fan_in x fan_out) and zero biases per layer."""
    if len(widths) < 2:
        raise ValueError("an MLP needs at least one layer (two widths)")
    params = []
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = glorot_bound(fan_in, fan_out)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        params.append(
            Parameter(f"{prefix}.layer{layer}.weight", Tensor(weight, requires_grad=True))
        )
        params.append(
            Parameter(
                f"{prefix}.layer{layer}.bias",
                Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True),
            )
        )
    return params


class Mlp:
    """LeakyReLU on hidden layers, linear output layer."""

    def __init__(self, params: Sequence[Parameter], slope: float = LEAKY_SLOPE) -> None:
        if len(params) % 2:
            raise ValueError("MLP parameters come in weight/bias pairs")
        self.params = list(params)
        self.slope = slope

    @property
    def input_width(self) -> int:
        return self.params[0].shape[0]

    @property
    def output_width(self) -> int:
        return self.params[-1].shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_width:
            raise ShapeMismatchError(
                f"{self.params[0].name} expects width {self.input_width}, got {x.shape[-1]}"
            )
        layers = len(self.params) // 2
        for layer in range(layers):
            weight = self.params[2 * layer].tensor
            bias = self.params[2 * layer + 1].tensor
            x = add(matmul(x, weight), bias)
            if layer < layers - 1:
                x = leaky_relu(x, self.slope)
        return x
