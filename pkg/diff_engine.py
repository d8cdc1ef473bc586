"""
Differentiation Engine
Dense float64 tensors with a define-by-run reverse-mode tape.

Every op returns a new Tensor that remembers its parents and a closure that pushes
the output gradient back into them. A tape is rebuilt on every forward pass, so
query groups of different sizes never share graph structure.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

# Probabilities entering a log are clamped into [PROB_EPS, 1 - PROB_EPS]
PROB_EPS = 1e-12
ELU_ALPHA = 1.0
LAYER_NORM_EPS = 1e-5

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense float64 array that participates in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        parents: Tuple["Tensor", ...] = (),
        op: str = "leaf",
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.name = name
        self._parents = parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return hadamard(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return hadamard(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "TensorLike") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, ArrayLike]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(value: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Create a leaf tensor that collects a gradient during backward."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, parents, op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    # bias rows: (n, h) with (h,)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product of an (m, p) tensor with a (p, q) tensor or a (p,) vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g: np.ndarray) -> None:
        if b.ndim == 1:
            a._accumulate(np.outer(g, b.data))
        else:
            a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", _backward)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g.T)

    return _node(a.data.T, (a,), "transpose", _backward)


def concat_cols(parts: Sequence[TensorLike]) -> Tensor:
    """Concatenate matrices with equal row counts side by side."""
    tensors = [as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeError("concat_cols: nothing to concatenate")
    rows = tensors[0].shape[0] if tensors[0].ndim == 2 else None
    for t in tensors:
        if t.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: incompatible shapes {tensors[0].shape} and {t.shape}"
            )
    widths = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def _backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t._accumulate(g[:, lo:hi])

    return _node(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors),
                 "concat_cols", _backward)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")

    def _backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", _backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")

    def _backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", _backward)


def hadamard(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "hadamard")

    def _backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "hadamard", _backward)


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * factor)

    return _node(a.data * factor, (a,), "scale", _backward)


def one_minus(a: TensorLike) -> Tensor:
    """1 - a, used by the highway carry gate."""
    a = as_tensor(a)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(-g)

    return _node(1.0 - a.data, (a,), "one_minus", _backward)


def sum_all(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _node(np.asarray(a.data.sum()), (a,), "sum_all", _backward)


def mean_all(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / max(a.data.size, 1))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = expit(a.data)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), "sigmoid", _backward)


def softmax_rowless(a: TensorLike) -> Tensor:
    """Softmax over a 1-D vector, stabilized by subtracting the maximum."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"softmax_rowless: expected a vector, got shape {a.shape}")
    shifted = np.exp(a.data - a.data.max())
    out_data = shifted / shifted.sum()

    def _backward(g: np.ndarray) -> None:
        a._accumulate(out_data * (g - np.dot(g, out_data)))

    return _node(out_data, (a,), "softmax", _backward)


def elu(a: TensorLike, alpha: float = ELU_ALPHA) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    neg_exp = np.exp(np.minimum(a.data, 0.0))
    out_data = np.where(positive, a.data, alpha * (neg_exp - 1.0))

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * np.where(positive, 1.0, alpha * neg_exp))

    return _node(out_data, (a,), "elu", _backward)


def layer_norm(a: TensorLike, gain: TensorLike, bias: TensorLike,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Row-wise layer normalization followed by an elementwise gain and bias.

    Args:
        a: (n, h) input
        gain: (h,) scale applied after normalization
        bias: (h,) shift applied after normalization
        eps: variance floor

    Returns:
        (n, h) tensor
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if a.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeError(
            f"layer_norm: incompatible shapes {a.shape} and {gain.shape}/{bias.shape}"
        )
    width = a.shape[1]
    centered = a.data - a.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def _backward(g: np.ndarray) -> None:
        gain._accumulate((g * normed).sum(axis=0))
        bias._accumulate(g.sum(axis=0))
        d_normed = g * gain.data
        a._accumulate(
            inv_std / width * (
                width * d_normed
                - d_normed.sum(axis=1, keepdims=True)
                - normed * (d_normed * normed).sum(axis=1, keepdims=True)
            )
        )

    return _node(normed * gain.data + bias.data, (a, gain, bias), "layer_norm", _backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _clamp_prob(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
    return clamped, inside


def bce(pred: TensorLike, target: TensorLike) -> Tensor:
    """
    Mean binary cross entropy between predictions in (0, 1) and targets in [0, 1].

    Targets are treated as constants; no gradient flows into them.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: incompatible shapes {pred.shape} and {target.shape}")
    p, inside = _clamp_prob(pred.data)
    t = target.data
    count = max(p.size, 1)
    value = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum() / count

    def _backward(g: np.ndarray) -> None:
        local = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0)
        pred._accumulate(g * local / count)

    return _node(np.asarray(value), (pred,), "bce", _backward)


def cross_entropy(p_target: TensorLike, p_pred: TensorLike) -> Tensor:
    """-sum(p_target * log(p_pred)) with p_pred clamped away from zero."""
    p_target, p_pred = as_tensor(p_target), as_tensor(p_pred)
    if p_target.shape != p_pred.shape:
        raise ShapeError(
            f"cross_entropy: incompatible shapes {p_target.shape} and {p_pred.shape}"
        )
    p, inside = _clamp_prob(p_pred.data)
    t = p_target.data
    value = -(t * np.log(p)).sum()

    def _backward(g: np.ndarray) -> None:
        p_pred._accumulate(g * np.where(inside, -t / p, 0.0))

    return _node(np.asarray(value), (p_pred,), "cross_entropy", _backward)


# ---------------------------------------------------------------------------
# Tape traversal
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate .grad on every tensor reachable from a scalar loss.

    Args:
        loss: scalar (size 1) tensor produced by ops on this tape
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: expected a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(
    f: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """
    Compare analytic gradients against central finite differences.

    Args:
        f: builds a scalar loss from a mapping of named tensors
        params: named float64 arrays at which to check
        step: finite-difference step

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    leaves = {name: parameter(value, name=name) for name, value in params.items()}
    loss = f(leaves)
    backward(loss)

    worst = 0.0
    for name, value in params.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(np.asarray(value, dtype=np.float64))
        base = np.array(value, dtype=np.float64)
        for index in np.ndindex(base.shape):
            numeric = _central_difference(f, params, name, base, index, step)
            a = float(analytic[index])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    logger.debug(f"grad_check over {len(params)} parameters: max relative error {worst:.3e}")
    return worst


def _central_difference(f, params, name, base, index, step) -> float:
    def evaluate(offset: float) -> float:
        shifted = base.copy()
        shifted[index] += offset
        constants = {k: as_tensor(shifted if k == name else v) for k, v in params.items()}
        return f(constants).item()

    return (evaluate(step) - evaluate(-step)) / (2.0 * step)


def collect_grads(leaves: Iterable[Tuple[str, Tensor]]) -> Dict[str, np.ndarray]:
    """Gradients by name, zeros for leaves the loss never touched."""
    grads = {}
    for name, leaf in leaves:
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads
