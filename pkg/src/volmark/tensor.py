"""Dense float tensors with a reverse-mode differentiation tape.

Every op returns a new immutable :class:`Tensor`. When any input requires a
gradient the op attaches a :class:`Node` to its output; :func:`backward`
collects the reachable nodes into a :class:`Tape` (ordered by creation id,
which is a topological order) and replays it in reverse.

Shape alignment is explicit. Elementwise binary ops accept either two tensors
of identical shape or a tensor and a Python scalar; anything else must go
through :func:`broadcast_to` first.
"""

from __future__ import annotations

import itertools
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy.special import erf, expit

Scalar = Union[int, float]

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Row-major float32/float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        _init(self, _contiguous(arr), requires_grad, None)
        _check_finite("Tensor", self.data)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return _leaf(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("div: only division by a scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- method forms --------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis=-1, mask=None):
        return softmax(self, axis, mask)


def _contiguous(a) -> np.ndarray:
    a = np.asarray(a)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def _init(t: Tensor, data: np.ndarray, requires_grad: bool, node: Node | None) -> None:
    data.flags.writeable = False
    t.data = data
    t.requires_grad = requires_grad
    t.node = node


def _leaf(data: np.ndarray, requires_grad: bool = False) -> Tensor:
    t = Tensor.__new__(Tensor)
    _init(t, _contiguous(data), requires_grad, None)
    return t


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result, recording it on the tape when any input is tracked.

    ``vjp(g)`` must return one gradient (or ``None``) per input, each shaped
    like the corresponding input. Used by composite primitives such as the
    3D convolutions.
    """
    _check_finite(op, data)
    inputs = tuple(inputs)
    tracked = any(t.requires_grad for t in inputs)
    node = Node(next(_node_ids), op, inputs, vjp) if tracked else None
    t = Tensor.__new__(Tensor)
    _init(t, _contiguous(data), tracked, node)
    return t


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Return ``x`` as a constant tensor, matching ``like``'s dtype if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------
def add(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if _is_scalar(b):
        return make_op("add", a.data + float(b), (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if _is_scalar(b):
        return make_op("sub", a.data - float(b), (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if _is_scalar(b):
        s = float(b)
        return make_op("mul", a.data * s, (a,), lambda g: (g * s,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading (batch) axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal-rank inputs with ndim >= 2, got {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), vjp)


# ----------------------------------------------------------------------
# layout
# ----------------------------------------------------------------------
def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) % max(x.ndim, 1) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return make_op("permute", np.transpose(x.data, axes).copy(), (x,),
                   lambda g: (np.transpose(g, inverse),))


def transpose(x: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return permute(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or x.size % known:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    in_shape = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:axis] + t.shape[axis + 1:] != ref.shape[:axis] + ref.shape[axis + 1:]:
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape} along axis {axis}")
        if t.dtype != ref.dtype:
            raise TypeError(f"concat: dtype mismatch {ref.dtype} vs {t.dtype}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices); the result is a copy."""
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, (slice, int, np.integer, type(Ellipsis))) for k in key):
        raise TypeError("slice: only basic int/slice indexing is supported; use gather")
    out = x.data[key]
    if out.size == 0:
        raise ShapeError(f"slice: empty result for shape {x.shape} and key {key}")
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return make_op("slice", np.array(out, copy=True), (x,), vjp)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Index rows of ``x`` along ``axis``; output axis is replaced by ``indices.shape``."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather: indices must be integers")
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for axis {axis} of extent {n}")
    out = np.take(x.data, idx, axis=axis)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, g_moved)
        return (full,)

    return make_op("gather", out, (x,), vjp)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly expand size-1 (or missing leading) axes to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    in_shape = x.shape
    lead = len(shape) - len(in_shape)
    expanded = tuple(i for i in range(len(shape))
                     if i < lead or (in_shape[i - lead] == 1 and shape[i] != 1))

    def vjp(g):
        s = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (s.reshape(in_shape),)

    return make_op("broadcast_to", np.array(out, copy=True), (x,), vjp)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_back(g, in_shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    return make_op("reduce_sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,),
                   lambda g: (np.array(_expand_back(g, shape, axes, keepdims)),))


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    return make_op("reduce_mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,),
                   lambda g: (np.array(_expand_back(g, shape, axes, keepdims)) / count,))


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient is split evenly between tied maxima."""
    axes = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    hit = (x.data == m).astype(x.dtype)
    hit /= hit.sum(axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)
    shape = x.shape
    return make_op("reduce_max", np.asarray(out), (x,),
                   lambda g: (_expand_back(g, shape, axes, keepdims) * hit,))


# ----------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------
def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return make_op("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return make_op("log", y, (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where unclamped."""
    xd = x.data
    inside = ((xd >= lo) & (xd <= hi)).astype(x.dtype)
    return make_op("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    pos = (x.data > 0).astype(x.dtype)
    return make_op("relu", x.data * pos, (x,), lambda g: (g * pos,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return make_op("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (boolean, same shape as ``x``) marks usable entries; the rest get
    a -inf logit. A slice with no usable entry raises ``ValueError``.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} vs input {x.shape}")
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: every entry masked along the softmax axis for some slice")
        xd = np.where(mask, xd, -np.inf)
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", y, (x,), vjp)


def topk_indices(x: Tensor | np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the ``k`` largest entries along ``axis``, best first.

    Ties go to the lowest index. Not differentiable and records nothing.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = xd.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"topk_indices: k={k} out of range for axis extent {n}")
    order = np.argsort(-xd, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "matmul": matmul,
    "permute": permute, "transpose": transpose, "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": slice_, "gather": gather, "broadcast_to": broadcast_to,
    "reduce_sum": reduce_sum, "reduce_mean": reduce_mean, "reduce_max": reduce_max,
    "exp": exp, "log": log, "clip": clip, "relu": relu, "gelu": gelu,
    "sigmoid": sigmoid, "softmax": softmax, "topk_indices": topk_indices,
}


def apply(op_kind: str, *inputs, **kwargs):
    """Dispatch an op by name, e.g. ``apply("softmax", x, axis=0)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------
# tape and backward
# ----------------------------------------------------------------------
@dataclass
class Tape:
    """Recorded ops reachable from a loss, in topological (creation) order."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        stack = [loss]
        found = []
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.id)
        return cls(found)

    def __len__(self) -> int:
        return len(self.records)

    def run(self, loss: Tensor) -> "Gradients":
        buffers: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        if loss.node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for t in reversed(self.records):
            g = buffers.pop(id(t), None)
            if g is None:
                continue
            for inp, gi in zip(t.node.inputs, t.node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in buffers:
                    buffers[key] = buffers[key] + gi
                else:
                    buffers[key] = np.asarray(gi, dtype=inp.dtype)
                if inp.node is None:
                    leaves[key] = inp
        return Gradients({k: (leaves[k], buffers[k]) for k in leaves if k in buffers})


class Gradients(Mapping):
    """Gradient per leaf tensor; unreached leaves read as zeros."""

    def __init__(self, entries: dict[int, tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._entries.get(id(t))
        if hit is None or hit[0] is not t:
            return np.zeros(t.shape, dtype=t.dtype)
        return hit[1]

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._entries

    def __iter__(self) -> Iterator[Tensor]:
        return (t for t, _ in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode gradients of a 0-d ``loss`` w.r.t. every tracked leaf."""
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be 0-dimensional, got shape {loss.shape}")
    return Tape.from_loss(loss).run(loss)


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    g = backward(loss)
    return [g[t] for t in wrt]
