"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays. Operations executed while a ``Tape`` is
active record their parents and a backward rule on that tape; calling
``Tape.backward`` on a scalar result accumulates gradients into every
``requires_grad`` leaf that the scalar depends on. Without an active tape the
same operations run as plain array math, which is how evaluation-mode
inference stays cheap.

Everything is double precision: the finite-difference acceptance tolerance of
1e-4 is not reachable in float32, and the tensors involved are small enough
that the cost does not matter.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_ids = itertools.count()
_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked on the active gradient tape.

    Tensors are immutable after creation except for the ``grad`` buffer (and
    the controlled in-place perturbation that ``grad_check`` performs on the
    parameters it owns).
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _OpRecord:
    __slots__ = ("out_id", "parents", "backward")

    def __init__(self, out_id, parents, backward):
        self.out_id = out_id
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Use as a context manager; operations executed inside the block are
    recorded in topological order (an op's parents necessarily precede it).
    A tape belongs to one logical thread; independent tapes may run in
    parallel threads.
    """

    def __init__(self):
        self._ops: list[_OpRecord] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        self._ops.append(_OpRecord(out.node_id, parents, backward))
        self._produced.add(out.node_id)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

        Returns a map from leaf node id to its (accumulated) gradient tensor.
        Leaves that appear on the tape but are unreachable from ``loss`` get a
        zero gradient. Repeated calls without clearing grads add up.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id not in self._produced:
            raise ValueError("loss tensor was not recorded on this tape")

        flowing: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self._ops):
            g = flowing.pop(rec.out_id, None)
            if g is None:
                continue
            parent_grads = rec.backward(g)
            for parent, pg in zip(rec.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in self._produced:
                    if parent.node_id in flowing:
                        flowing[parent.node_id] = flowing[parent.node_id] + pg
                    else:
                        flowing[parent.node_id] = pg
                else:
                    parent.accumulate_grad(pg)
                    leaves[parent.node_id] = parent

        # Leaves present on the tape but not reached from the loss get zeros.
        for rec in self._ops:
            for parent in rec.parents:
                if (
                    parent.requires_grad
                    and parent.node_id not in self._produced
                    and parent.node_id not in leaves
                ):
                    parent.accumulate_grad(np.zeros_like(parent.data))
                    leaves[parent.node_id] = parent

        return {nid: Tensor(t.grad) for nid, t in leaves.items()}


def apply_op(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap an externally computed result as a differentiable op.

    ``backward`` maps the output gradient to one gradient (or None) per
    parent. This is the extension hook used by the convolution and any other
    op whose forward pass is cheaper outside the primitive set.
    """
    parents = tuple(parents)
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return apply_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return apply_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return apply_op(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "div")
    def bwd(g):
        da = _unbroadcast(g / b.data, a.shape)
        db = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return da, db
    return apply_op(a.data / b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def bwd(g):
        return (g * c,)
    return apply_op(a.data * c, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is defined as 0.
    mask = a.data > 0
    def bwd(g):
        return (g * mask,)
    return apply_op(np.where(mask, a.data, 0.0), (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    def bwd(g):
        return (g * y * (1.0 - y),)
    return apply_op(y, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    def bwd(g):
        return (g * y,)
    return apply_op(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    def bwd(g):
        return (g / a.data,)
    return apply_op(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(a.data)
    def bwd(g):
        return (g * 0.5 / y,)
    return apply_op(y, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    y = np.logaddexp(0.0, a.data)
    s = _sigmoid(a.data)
    def bwd(g):
        return (g * s,)
    return apply_op(y, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    inside = (a.data >= lo) & (a.data <= hi)
    def bwd(g):
        return (g * inside,)
    return apply_op(np.clip(a.data, lo, hi), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast (stacked matmul)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None

    def bwd(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return da, db

    return apply_op(a.data @ b.data, (a, b), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by a row-max shift."""
    if a.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    if np.isnan(a.data).any():
        raise DomainError("softmax_rows received NaN input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)
    return apply_op(y, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        axes.append(ax % ndim)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axis}")
    return tuple(sorted(axes))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    def bwd(g):
        return (_expand_reduced(g, a.shape, axes, keepdims),)
    return apply_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    def bwd(g):
        return (_expand_reduced(g, a.shape, axes, keepdims) / count,)
    return apply_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), bwd)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over one axis (or all); gradient flows to the first max position."""
    axes = _norm_axes(axis, a.ndim)
    if len(axes) not in (1, a.ndim):
        raise ShapeError("reduce_max supports a single axis or full reduction")
    if len(axes) == a.ndim:
        flat_idx = int(np.argmax(a.data))
        out = a.data.max(axis=axes, keepdims=keepdims)
        def bwd_all(g):
            gx = np.zeros_like(a.data)
            gx.reshape(-1)[flat_idx] = g.reshape(-1)[0]
            return (gx,)
        return apply_op(out, (a,), bwd_all)

    ax = axes[0]
    idx = np.argmax(a.data, axis=ax)
    out = a.data.max(axis=ax, keepdims=keepdims)
    def bwd(g):
        if keepdims:
            g = np.squeeze(g, axis=ax)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)
    return apply_op(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    def bwd(g):
        return (g.reshape(a.shape),)
    return apply_op(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = np.argsort(axes)
    def bwd(g):
        return (g.transpose(inverse),)
    return apply_op(a.data.transpose(axes), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ndim = tensors[0].ndim
    if any(t.ndim != ndim for t in tensors):
        raise ShapeError("concat operands differ in rank")
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )
    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a flat index list")
    if a.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError("take_rows index out of range")
    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)
    return apply_op(a.data[idx], (a,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be deterministic and rebuild its graph from the current values
    of ``params`` on every call. Returns the max over all parameter entries of
    |analytic - numeric| / max(1, |numeric|).
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise DomainError("grad_check: non-finite loss at base point")
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }

    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise DomainError(f"grad_check: non-finite evaluation perturbing {name}[{i}]")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
