"""
Dense real64 matrix arithmetic with tape-based reverse-mode
differentiation.

Values are numpy float64 arrays of shape (rows, cols) or, for
batched evaluation, (batch, rows, cols). Every operation records a
node on the tape of its inputs; ``Tape.backward`` replays the tape
in reverse order and accumulates gradients into the watched
``Param`` objects.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from ._shared.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class Param:
    """
    Trainable matrix (or 1x1 scalar) with its gradient buffer.

    Parameters
    ----------
    value: array-like
        Initial value. Scalars are stored as 1x1 matrices.

    name: str
        Canonical name used in checkpoints.

    trainable: bool
        If False, the optimizer skips the parameter. Default: True
    """

    def __init__(self, value, name: str = "", trainable: bool = True):
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        if value.ndim != 2:
            raise ShapeError(f"Param {name!r} must be a matrix, got shape {value.shape}")

        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> Tuple[int, int]:
        """Shape of the stored matrix"""
        return self.value.shape

    @property
    def size(self) -> int:
        """Number of scalar entries"""
        return int(self.value.size)

    def zero_grad(self):
        """Resets the gradient buffer to exactly zero"""
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param(name={self.name!r}, shape={self.shape})"


class Tensor2:
    """
    Node of a differentiation tape holding a matrix value.
    """

    __slots__ = ("value", "grad", "tape", "param", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        value: np.ndarray,
        tape: "Tape",
        parents: Tuple["Tensor2", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        param: Optional[Param] = None,
    ):
        self.value = value
        self.grad = None
        self.tape = tape
        self.param = param
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        """Shape of the value"""
        return self.value.shape

    @property
    def rows(self) -> int:
        """Number of rows of each matrix"""
        return self.value.shape[-2]

    @property
    def cols(self) -> int:
        """Number of columns of each matrix"""
        return self.value.shape[-1]

    def numpy(self) -> np.ndarray:
        """Returns a copy of the value"""
        return np.array(self.value, copy=True)

    def item(self) -> float:
        """Returns the value of a single-entry node"""
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single entry, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor2(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """
    Ordered record of primitive operations.

    A tape belongs to one forward pass. Parameters enter it
    through ``watch`` and receive their gradients when
    ``backward`` is called on a scalar node of the same tape.
    """

    def __init__(self):
        self._nodes: List[Tensor2] = []
        self._watched: Dict[int, Tensor2] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def constant(self, value) -> Tensor2:
        """
        Wraps an array that needs no gradient.

        Parameters
        ----------
        value: array-like
            Matrix or batch of matrices.

        Returns
        -------
        Tensor2
            Leaf node without gradient.
        """
        value = _as_matrix(value)
        _check_finite(value, "constant")
        node = Tensor2(value, self)
        self._nodes.append(node)
        return node

    def watch(self, param: Param) -> Tensor2:
        """
        Returns the leaf node of a parameter, creating
        it the first time the parameter is used on this tape.
        """
        node = self._watched.get(id(param))
        if node is None:
            _check_finite(param.value, f"param {param.name}")
            node = Tensor2(param.value, self, requires_grad=param.trainable, param=param)
            self._watched[id(param)] = node
            self._nodes.append(node)
        return node

    def record(
        self,
        value: np.ndarray,
        parents: Tuple[Tensor2, ...],
        backward_fn: BackwardFn,
        op: str,
    ) -> Tensor2:
        """
        Appends the result of a primitive operation.

        Raises
        ------
        NonFiniteError
            If the value contains NaN or Inf.
        """
        _check_finite(value, op)
        requires_grad = any(p.requires_grad for p in parents)
        node = Tensor2(
            value,
            self,
            parents=parents,
            backward_fn=backward_fn if requires_grad else None,
            requires_grad=requires_grad,
        )
        self._nodes.append(node)
        return node

    def backward(self, loss: Tensor2):
        """
        Reverse sweep from a scalar loss. Gradients are
        added to ``Param.grad`` of every watched parameter.

        Parameters
        ----------
        loss: Tensor2
            Single-entry node recorded on this tape.

        Raises
        ------
        ShapeError
            If the loss is not a scalar.
        """
        if loss.tape is not self:
            raise ValueError("Loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"Loss must be scalar, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("Tape was already replayed; record a new forward pass")
        self._consumed = True

        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward_fn is None:
                continue
            needs = tuple(p.requires_grad for p in node._parents)
            parent_grads = node._backward_fn(node.grad, needs)
            for parent, grad, need in zip(node._parents, parent_grads, needs):
                if not need or grad is None:
                    continue
                if parent.grad is None:
                    parent.grad = grad
                else:
                    parent.grad = parent.grad + grad

        for node in self._watched.values():
            if node.grad is None or not node.requires_grad:
                continue
            _check_finite(node.grad, f"gradient of {node.param.name}")
            node.param.grad += node.grad


def backward(loss: Tensor2):
    """
    Populates the gradients of every Param reachable from ``loss``.
    """
    loss.tape.backward(loss)


def _as_matrix(value) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        value = value.reshape(1, 1)
    elif value.ndim == 1:
        value = value.reshape(1, -1)
    if value.ndim not in (2, 3):
        raise ShapeError(f"Expected a matrix or a batch of matrices, got shape {value.shape}")
    return value


def _check_finite(value: np.ndarray, op: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back to the shape of the operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(tape: Tape, value) -> Tensor2:
    if isinstance(value, Tensor2):
        return value
    if isinstance(value, Param):
        return tape.watch(value)
    return tape.constant(value)


def _pair(a, b) -> Tuple[Tensor2, Tensor2]:
    tape = a.tape if isinstance(a, Tensor2) else b.tape
    return _lift(tape, a), _lift(tape, b)


def _broadcast_shape(a: Tensor2, b: Tensor2, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e


def add(a, b) -> Tensor2:
    """Elementwise sum with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return a.tape.record(a.value + b.value, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor2:
    """Elementwise difference with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward_fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return a.tape.record(a.value - b.value, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor2:
    """Elementwise product with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(g, needs):
        return (
            _unbroadcast(g * b.value, a.shape) if needs[0] else None,
            _unbroadcast(g * a.value, b.shape) if needs[1] else None,
        )

    return a.tape.record(a.value * b.value, (a, b), backward_fn, "mul")


def scale(a: Tensor2, factor: float) -> Tensor2:
    """Multiplication by a fixed real number."""
    factor = float(factor)

    def backward_fn(g, needs):
        return (g * factor,)

    return a.tape.record(a.value * factor, (a,), backward_fn, "scale")


def matmul(a, b) -> Tensor2:
    """
    Matrix product, broadcasting over a leading batch axis.

    Parameters
    ----------
    a: Tensor2
        Left operand, shape (..., n, k).

    b: Tensor2
        Right operand, shape (..., k, m).

    Returns
    -------
    Tensor2
        Product of shape (..., n, m).

    Raises
    ------
    ShapeError
        If the inner dimensions differ.
    """
    a, b = _pair(a, b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} inner dimensions differ")

    def backward_fn(g, needs):
        grad_a = grad_b = None
        if needs[0]:
            grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if needs[1]:
            grad_b = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return grad_a, grad_b

    return a.tape.record(np.matmul(a.value, b.value), (a, b), backward_fn, "matmul")


def transpose(a: Tensor2) -> Tensor2:
    """Swaps the last two axes."""

    def backward_fn(g, needs):
        return (np.swapaxes(g, -1, -2),)

    return a.tape.record(np.swapaxes(a.value, -1, -2), (a,), backward_fn, "transpose")


def softmax_rows(m: Tensor2, mask: Optional[np.ndarray] = None) -> Tensor2:
    """
    Row-wise Softmax, stabilized by subtracting each row maximum.

    Parameters
    ----------
    m: Tensor2
        Scores.

    mask: Optional[np.ndarray]
        Boolean matrix broadcastable to ``m``. False entries are
        excluded from their row, as with an additive -inf score.
        Default: None

    Returns
    -------
    Tensor2
        Nonnegative rows summing to one over their support.

    Raises
    ------
    ValueError
        If a mask row excludes every entry.
    """
    scores = m.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax_rows: a masked row has an empty support")
        scores = np.where(mask, scores, -np.inf)

    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=-1, keepdims=True)

    def backward_fn(g, needs):
        inner = (g * weights).sum(axis=-1, keepdims=True)
        return (weights * (g - inner),)

    return m.tape.record(weights, (m,), backward_fn, "softmax_rows")


def gelu(m: Tensor2) -> Tensor2:
    """Exact GELU, x * Phi(x) with Phi computed through erf."""
    x = m.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def backward_fn(g, needs):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return m.tape.record(x * cdf, (m,), backward_fn, "gelu")


def linear(m: Tensor2, w: Union[Param, Tensor2], b: Union[Param, Tensor2]) -> Tensor2:
    """
    Fully connected layer applied row-wise, ``m @ w + b``.

    Raises
    ------
    ShapeError
        If ``m.cols`` differs from the number of rows of ``w``.
    """
    w = _lift(m.tape, w)
    b = _lift(m.tape, b)
    if m.cols != w.rows:
        raise ShapeError(f"linear: input has {m.cols} columns, weight has {w.rows} rows")
    return add(matmul(m, w), b)


def concat_cols(nodes: Sequence[Tensor2]) -> Tensor2:
    """Concatenates along the feature (last) axis."""
    if not nodes:
        raise ValueError("concat_cols needs at least one node")
    tape = nodes[0].tape
    try:
        lead = np.broadcast_shapes(*[n.shape[:-1] for n in nodes])
    except ValueError as e:
        raise ShapeError(f"concat_cols: incompatible shapes {[n.shape for n in nodes]}") from e
    out = np.concatenate([np.broadcast_to(n.value, lead + (n.cols,)) for n in nodes], axis=-1)
    bounds = np.cumsum([0] + [n.cols for n in nodes])

    def backward_fn(g, needs):
        return tuple(
            _unbroadcast(g[..., bounds[i] : bounds[i + 1]], n.shape) if needs[i] else None
            for i, n in enumerate(nodes)
        )

    return tape.record(out, tuple(nodes), backward_fn, "concat_cols")


def gather_rows(m: Tensor2, index: np.ndarray) -> Tensor2:
    """Selects rows ``index`` of every matrix."""
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g, needs):
        grad = np.zeros_like(m.value)
        np.add.at(grad, (Ellipsis, index, slice(None)), g)
        return (grad,)

    return m.tape.record(m.value[..., index, :], (m,), backward_fn, "gather_rows")


def sum_all(m: Tensor2) -> Tensor2:
    """Sum of every entry, as a 1x1 node."""

    def backward_fn(g, needs):
        return (np.broadcast_to(g.reshape(()), m.shape).copy(),)

    return m.tape.record(np.array([[m.value.sum()]]), (m,), backward_fn, "sum_all")


def mean_all(m: Tensor2) -> Tensor2:
    """Mean of every entry, as a 1x1 node."""
    return scale(sum_all(m), 1.0 / m.value.size)


def sum_matrix(m: Tensor2) -> Tensor2:
    """Sum over the last two axes, keeping the batch axis."""

    def backward_fn(g, needs):
        return (np.broadcast_to(g, m.shape).copy(),)

    return m.tape.record(m.value.sum(axis=(-2, -1), keepdims=True), (m,), backward_fn, "sum_matrix")


def square(m: Tensor2) -> Tensor2:
    """Elementwise square."""

    def backward_fn(g, needs):
        return (2.0 * g * m.value,)

    return m.tape.record(m.value * m.value, (m,), backward_fn, "square")


def absolute(m: Tensor2) -> Tensor2:
    """Elementwise absolute value, with zero subgradient at zero."""

    def backward_fn(g, needs):
        return (g * np.sign(m.value),)

    return m.tape.record(np.abs(m.value), (m,), backward_fn, "absolute")


def sqrt(m: Tensor2) -> Tensor2:
    """Elementwise square root, with zero subgradient at zero."""
    if np.any(m.value < 0):
        raise NonFiniteError("sqrt of a negative entry")
    root = np.sqrt(m.value)

    def backward_fn(g, needs):
        safe = np.where(root > 0, root, 1.0)
        return (np.where(root > 0, g / (2.0 * safe), 0.0),)

    return m.tape.record(root, (m,), backward_fn, "sqrt")


def tan(m: Tensor2) -> Tensor2:
    """Elementwise tangent."""

    def backward_fn(g, needs):
        return (g / np.cos(m.value) ** 2,)

    return m.tape.record(np.tan(m.value), (m,), backward_fn, "tan")


def clip(m: Tensor2, low: float, high: float) -> Tensor2:
    """Elementwise clamp; the gradient vanishes outside [low, high]."""

    def backward_fn(g, needs):
        inside = (m.value >= low) & (m.value <= high)
        return (g * inside,)

    return m.tape.record(np.clip(m.value, low, high), (m,), backward_fn, "clip")
