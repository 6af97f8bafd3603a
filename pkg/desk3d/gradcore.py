"""Reverse-mode automatic differentiation over dense numpy arrays.

Every forward operation returns a new :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks that graph in reverse topological order and
accumulates ``d(loss)/d(leaf)`` into the ``grad`` field of every leaf tensor that
requires a gradient.
"""

import contextlib
import logging
import math
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import Desk3DGradientError, Desk3DNumericalError, Desk3DShapeError, Desk3DValidationError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", np.ndarray, float, int]
Axis = Union[None, int, Tuple[int, ...]]


class _GradState(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype: type = np.float32


_STATE = _GradState()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (sampling, evaluation, baking)."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@contextlib.contextmanager
def default_dtype(dtype: type) -> Iterator[None]:
    """Temporarily change the floating dtype new tensors are created with."""
    previous = _STATE.dtype
    _STATE.dtype = dtype
    try:
        yield
    finally:
        _STATE.dtype = previous


def get_default_dtype() -> type:
    """Return the dtype new tensors are created with (float32 unless overridden)."""
    return _STATE.dtype


def is_grad_enabled() -> bool:
    """Return whether forward operations currently record a graph."""
    return bool(_STATE.grad_enabled)


class Tensor:
    """Dense array with optional participation in the gradient tape.

    Args:
        data: Array-like values, copied and cast to the default dtype
        requires_grad: Whether gradients should be accumulated into ``grad``
        name: Optional label used in error messages
    """

    __array_ufunc__ = None

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[float]],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=_STATE.dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        """Return the underlying array (not a copy)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing no graph with this one."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, key: object) -> "Tensor":
        return index(self, key)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(value: Operand) -> Tensor:
    """Wrap constants in a non-differentiable tensor; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_STATE.dtype)
    if not np.all(np.isfinite(out.data)):
        raise Desk3DNumericalError(f"Operation '{op}' produced non-finite values")
    out.grad = None
    out.name = None
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _normalize_axis(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def backward(loss: Tensor) -> None:
    """Accumulate ``d(loss)/d(leaf)`` into every reachable leaf requiring grad.

    Repeated calls accumulate; reset with ``zero_grad`` between steps.

    Raises:
        Desk3DGradientError: If ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise Desk3DGradientError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward() called on a loss that does not require grad; nothing to do")
        return

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = np.array(grad, dtype=node.data.dtype) if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.data.shape:
                raise Desk3DGradientError(
                    f"Gradient shape {parent_grad.shape} does not match tensor shape {parent.data.shape}"
                )
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _bw, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _bw, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), _bw, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), _bw, "div")


def neg(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Operand, exponent: float) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.power(x.data, exponent)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * exponent * np.power(x.data, exponent - 1),)

    return _result(out, (x,), _bw, "power")


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Operand) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Operand) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _result(out, (x,), _bw, "sqrt")


def absolute(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),), "relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    return _result(out, (x,), lambda g: (g * _stable_sigmoid(x.data),), "softplus")


def silu(x: Operand) -> Tensor:
    x = as_tensor(x)
    return mul(x, sigmoid(x))


def clamp(x: Operand, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(x: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), _bw, "sum")


def mean(x: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(perm))
    return _result(x.data.transpose(perm), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(x: Operand) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    perm = list(range(x.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(x, perm)


def index(x: Operand, key: object) -> Tensor:
    x = as_tensor(x)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(x.data[key], (x,), _bw, "index")


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, _bw, "concat")


def stack(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _result(np.stack([p.data for p in parts], axis=axis), parts, _bw, "stack")


def matmul(a: Operand, b: Operand) -> Tensor:
    """Batched matrix product over the last two axes (both operands need ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise Desk3DShapeError(f"matmul requires operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise Desk3DShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), _bw, "matmul")


def softmax(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), _bw, "softmax")


def cumsum(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _result(np.cumsum(x.data, axis=axis), (x,), _bw, "cumsum")


# ---------------------------------------------------------------------------
# Composite neural operations
# ---------------------------------------------------------------------------


def attention(q: Operand, k: Operand, v: Operand) -> Tensor:
    """Scaled dot-product attention ``softmax(q kᵀ / √d) v`` over the last two axes.

    Raises:
        Desk3DShapeError: If the inner dimension of ``q`` and ``k`` differ or ``k``/``v`` lengths differ
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise Desk3DShapeError(f"attention query/key dimensions differ: {q.shape[-1]} != {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise Desk3DShapeError(f"attention key/value lengths differ: {k.shape[-2]} != {v.shape[-2]}")
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def layer_norm(
    x: Operand, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance, then apply the affine."""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    y = centered / sqrt(variance + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def bilinear_sample(plane: Operand, coords: Operand) -> Tensor:
    """Sample a ``[P, Q, C]`` feature plane at ``[N, 2]`` coordinates in ``[-1, 1]``.

    The first coordinate indexes the first plane axis. Corners are aligned with the
    extreme texels. Differentiable with respect to both the plane and the coordinates.
    """
    plane, coords = as_tensor(plane), as_tensor(coords)
    if plane.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise Desk3DShapeError(f"bilinear_sample expects [P,Q,C] and [N,2], got {plane.shape} and {coords.shape}")
    p_extent, q_extent = plane.shape[0], plane.shape[1]
    fu = (np.clip(coords.data[:, 0], -1.0, 1.0) + 1.0) * 0.5 * (p_extent - 1)
    fv = (np.clip(coords.data[:, 1], -1.0, 1.0) + 1.0) * 0.5 * (q_extent - 1)
    i0 = np.clip(np.floor(fu).astype(np.int64), 0, max(p_extent - 2, 0))
    j0 = np.clip(np.floor(fv).astype(np.int64), 0, max(q_extent - 2, 0))
    i1 = np.minimum(i0 + 1, p_extent - 1)
    j1 = np.minimum(j0 + 1, q_extent - 1)
    wu = (fu - i0)[:, None].astype(plane.data.dtype)
    wv = (fv - j0)[:, None].astype(plane.data.dtype)
    f00, f10 = plane.data[i0, j0], plane.data[i1, j0]
    f01, f11 = plane.data[i0, j1], plane.data[i1, j1]
    out = (1 - wu) * (1 - wv) * f00 + wu * (1 - wv) * f10 + (1 - wu) * wv * f01 + wu * wv * f11

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g_plane = None
        if plane.requires_grad:
            g_plane = np.zeros_like(plane.data)
            np.add.at(g_plane, (i0, j0), g * (1 - wu) * (1 - wv))
            np.add.at(g_plane, (i1, j0), g * wu * (1 - wv))
            np.add.at(g_plane, (i0, j1), g * (1 - wu) * wv)
            np.add.at(g_plane, (i1, j1), g * wu * wv)
        g_coords = None
        if coords.requires_grad:
            d_wu = (1 - wv) * (f10 - f00) + wv * (f11 - f01)
            d_wv = (1 - wu) * (f01 - f00) + wu * (f11 - f10)
            g_coords = np.stack(
                [
                    np.sum(g * d_wu, axis=1) * 0.5 * (p_extent - 1),
                    np.sum(g * d_wv, axis=1) * 0.5 * (q_extent - 1),
                ],
                axis=1,
            )
        return g_plane, g_coords

    return _result(out, (plane, coords), _bw, "bilinear_sample")


def laplace_density(sdf: Operand, beta: float) -> Tensor:
    """Convert signed distances to volume density ``(1/beta) * Psi_beta(-sdf)``.

    ``Psi_beta`` is the CDF of a zero-mean Laplace distribution with scale ``beta``.

    Raises:
        Desk3DValidationError: If ``beta`` is not positive
    """
    if not beta > 0:
        raise Desk3DValidationError(f"beta must be positive, got {beta}")
    sdf = as_tensor(sdf)
    decay = np.exp(-np.abs(sdf.data) / beta)
    out = np.where(sdf.data >= 0, 0.5 * decay, 1.0 - 0.5 * decay) / beta

    def _bw(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * (-0.5 / (beta * beta)) * decay,)

    return _result(out, (sdf,), _bw, "laplace_density")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def gradcheck(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3, probes: int = 10, seed: int = 0
) -> float:
    """Compare backward() against central finite differences at random entries.

    The check runs in float64 so that the finite differences resolve small
    relative errors; the forward and backward code paths are the ones used in
    float32 everywhere else.

    Args:
        fn: Function of tensors returning a scalar tensor
        inputs: Input arrays; every input is differentiated
        h: Finite-difference step
        probes: Number of random entries probed per input
        seed: Seed for probe selection

    Returns:
        The largest error ``|analytic - numeric| / max(1, |analytic|, |numeric|)``
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
        backward(fn(*tensors))
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        worst = 0.0
        with no_grad():
            for which, tensor in enumerate(tensors):
                for _ in range(probes):
                    flat = int(rng.integers(tensor.size))
                    position = np.unravel_index(flat, tensor.shape)
                    original = tensor.data[position]
                    tensor.data[position] = original + h
                    upper = fn(*tensors).item()
                    tensor.data[position] = original - h
                    lower = fn(*tensors).item()
                    tensor.data[position] = original
                    numeric = (upper - lower) / (2.0 * h)
                    exact = float(analytic[which][position])
                    error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
                    worst = max(worst, error)
    return worst
