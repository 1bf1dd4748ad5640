"""Dense tensors with a reverse-mode gradient tape.

The operation set is deliberately small: exactly what a GAP-headed conv
classifier, its BCE objective and the contrastive patch loss need. Every
tensor is an immutable wrapper around a read-only numpy array. Operations are
recorded only while a :class:`GradTape` is active and at least one input
requires a gradient, so inference code pays nothing for autodiff.

Example:
    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)[w]
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision inside the block (gradient checks)."""
    prev = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable n-dimensional float array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        _check_finite(arr, "Tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def as_tensor(x: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class _Node:
    out: Tensor
    parents: Tuple[Tensor, ...]
    backward: BackwardFn


class GradTape:
    """Records differentiable operations for one backward pass.

    Nodes are appended in execution order, which is already a topological
    order; :func:`backward` walks them once in reverse. A tape belongs to the
    thread that opened it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], fn: BackwardFn) -> None:
        self.nodes.append(_Node(out, parents, fn))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each source, zeros where unreachable."""
        grads = backward(self, loss)
        return [grads.get(s, np.zeros_like(s.data)) for s in sources]


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) back through ``tape``.

    Returns a mapping from every reached leaf tensor (one that requires a
    gradient but was not produced on this tape) to its gradient array.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"gradient shape {pg.shape} != value shape {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent
    return {t: grads[k].astype(t.dtype, copy=False) for k, t in leaves.items() if k in grads}


def _make(arr: np.ndarray, parents: Tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    arr = np.asarray(arr)
    _check_finite(arr, op)
    tape = _active_tape()
    tracked = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, requires_grad=tracked)
    if tracked:
        tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    return _make(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


# --------------------------------------------------------------------------
# Reductions and shape
# --------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx])

    def fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), fn, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, fn, "stack")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log(sum(exp(a))) along one axis."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis)
    soft = shifted / total
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with ndim >= 2; use linear for vectors")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), fn, "matmul")


# --------------------------------------------------------------------------
# Network layers
# --------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIHW kernel (im2col)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs NCHW input and OIHW kernel, got {x.shape}, {w.shape}")
    if stride < 1 or pad < 0:
        raise ContractError("stride must be positive and pad non-negative")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise DimensionError(f"input has {c} channels, kernel expects {ci}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # N, Ho, Wo, C, KH, KW
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return np.ascontiguousarray(gx), gw

    return _make(np.ascontiguousarray(out), (x, w), fn, "conv2d")


def gap(feature: Tensor) -> Tensor:
    """Global average pooling, NCHW -> NC."""
    if feature.ndim != 4:
        raise DimensionError(f"gap needs an NCHW tensor, got {feature.shape}")
    return mean(feature, axis=(2, 3))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, D) and ``w`` of shape (D,) or (D, M)."""
    if x.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"linear shapes do not conform: {x.shape} @ {w.shape}")
    out = x.data @ w.data + b.data

    def fn(g):
        if w.ndim == 1:
            gx = np.outer(g, w.data)
            gw = x.data.T @ g
        else:
            gx = g @ w.data.T
            gw = x.data.T @ g
        gb = _unbroadcast(g, b.shape)
        return gx, gw, gb

    return _make(out, (x, w, b), fn, "linear")


def bce_loss(logit: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy on logits.

    Uses ``t*softplus(-z) + (1-t)*softplus(z)``, which equals
    ``-[t ln s(z) + (1-t) ln(1-s(z))]`` but never overflows.
    """
    t = np.asarray(target, dtype=logit.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("bce targets must lie in [0, 1]")
    z = logit.data
    out = t * _softplus(-z) + (1 - t) * _softplus(z)
    out = np.asarray(np.broadcast_to(out, np.broadcast_shapes(z.shape, t.shape)), dtype=logit.dtype)
    return _make(out, (logit,),
                 lambda g: (_unbroadcast(g * (_sigmoid(z) - t), logit.shape),), "bce_loss")


__all__ = [
    "Tensor", "GradTape", "backward", "float64_mode", "default_dtype", "as_tensor",
    "add", "sub", "mul", "neg", "scale", "relu", "sigmoid", "softplus", "exp", "log",
    "tsum", "mean", "reshape", "transpose", "getitem", "stack", "logsumexp", "matmul",
    "conv2d", "gap", "linear", "bce_loss",
]
