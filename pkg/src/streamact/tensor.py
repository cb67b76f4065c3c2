"""Dense real tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float64 by default (float32 is selectable for
throughput work; gradient checks require float64). Every operation whose
result depends on a tensor with ``requires_grad=True`` records its inputs
and a backward rule on the output node. ``backward(loss)`` assembles the
ComputationRecord reaching the scalar loss and replays the rules in reverse
execution order, accumulating gradients with ``+=`` wherever a tensor feeds
several ops.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, LabelError

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional array, optionally a node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_error()

    def _item_error(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operators -----------------------------------------------------

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
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise ContractError("tensor division is supported for scalar divisors only")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> "ComputationRecord":
        return backward(self)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward_rule: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = backward_rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_rule = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the pre-broadcast shape (one fused sum)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, extent in enumerate(shape) if extent == 1 and g.shape[lead + i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- record / backward ---------------------------------------------------


class ComputationRecord:
    """Executed primitive ops reaching a root, in topological order.

    Each entry is an op-output tensor carrying its input tensors and the
    backward rule; inputs always precede the ops that consume them.
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent._parents:
                    stack.append((parent, False))
        return cls([n for n in order if n._parents])


def backward(loss: Tensor) -> ComputationRecord:
    """Populate ``grad`` on every requires_grad tensor reaching ``loss``.

    The loss must be a single-element tensor produced through recorded ops
    (or itself require grad). Returns the replayed ComputationRecord.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    record = ComputationRecord.from_root(loss)
    if not record.ops and not loss.requires_grad:
        raise ContractError("backward root is not connected to any requires_grad tensor")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.ops):
        if node.grad is not None:
            node._backward_rule(node.grad)
    return record


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# -- elementwise ops ------------------------------------------------------


def _py_scalar(x) -> float | None:
    """Python/numpy scalars stay plain floats so they never upcast float32 data."""
    if isinstance(x, (int, float)):
        return float(x)
    if isinstance(x, np.generic) or (isinstance(x, np.ndarray) and x.ndim == 0):
        return float(x)
    return None


def add(a, b) -> Tensor:
    for x, y in ((a, b), (b, a)):
        s = _py_scalar(y)
        if s is not None:
            x = _as_tensor(x)

            def rule(g, x=x):
                _accumulate(x, g)

            return _node(x.data + s, (x,), rule)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), rule)


def sub(a, b) -> Tensor:
    s = _py_scalar(b)
    if s is not None:
        return add(a, -s)
    s = _py_scalar(a)
    if s is not None:
        return add(neg(b), s)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def rule(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), rule)


def mul(a, b) -> Tensor:
    for x, y in ((a, b), (b, a)):
        s = _py_scalar(y)
        if s is not None:
            x = _as_tensor(x)

            def rule(g, x=x, s=s):
                _accumulate(x, g * s)

            return _node(x.data * s, (x,), rule)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def rule(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), rule)


# -- linear algebra -------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _stacked_mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x (..., m, k) @ w (k, n) as a single flat gemm."""
    if x.ndim == 2:
        return x @ w
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1]) @ w

def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes; operands must be >= 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        out = _stacked_mm(a.data, b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def rule(g):
        if a.requires_grad:
            if b.ndim == 2:
                da = _stacked_mm(g, b.data.T).reshape(a.data.shape)
            else:
                da = _unbroadcast(g @ _swap_last(b.data), a.data.shape)
            _accumulate(a, da)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                db = np.ascontiguousarray(a.data).reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = _unbroadcast(_swap_last(a.data) @ g, b.data.shape)
            _accumulate(b, db)

    return _node(out, (a, b), rule)


# -- nonlinearities -------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = g - dot
        gx *= y
        _accumulate(x, gx)

    return _node(y, (x,), rule)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / biased variance 1, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over zero-width last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    var += eps
    np.sqrt(var, out=var)
    inv = np.divide(1.0, var, out=var)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(beta, g.sum(axis=lead))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = dxhat  # owned; safe to finish in place
            dx -= m1
            dx -= xhat * m2
            dx *= inv
            _accumulate(x, dx)

    return _node(out, (x, gamma, beta), rule)


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = _as_tensor(x)
    cdf = erf(x.data * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    out = x.data * cdf

    def rule(g):
        dx = x.data * x.data
        dx *= -0.5
        np.exp(dx, out=dx)
        dx *= _INV_SQRT_2PI
        dx *= x.data
        dx += cdf
        dx *= g
        _accumulate(x, dx)

    return _node(out, (x,), rule)


def cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Negative log softmax probability of the target class, in log space.

    ``logits`` is (C+1,) with an integer target, or (B, C+1) with B integer
    targets; 2-D input is reduced over rows by ``reduction`` (mean or sum).
    """
    logits = _as_tensor(logits)
    squeeze = logits.ndim == 1
    mat = logits.data[None, :] if squeeze else logits.data
    if mat.ndim != 2:
        raise DimensionError(f"cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if targets.shape != (mat.shape[0],):
        raise DimensionError(
            f"cross_entropy targets shape {targets.shape} does not match logits {logits.shape}")
    n_classes = mat.shape[1]
    if targets.min() < 0 or targets.max() >= n_classes:
        raise LabelError(
            f"target out of range: got {int(targets.min())}..{int(targets.max())}, "
            f"valid 0..{n_classes - 1}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")

    m = mat.max(axis=1, keepdims=True)
    shifted = mat - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    rows = np.arange(mat.shape[0])
    losses = lse[:, 0] - mat[rows, targets]
    total = losses.mean() if reduction == "mean" else losses.sum()

    def rule(g):
        p = np.exp(mat - lse)
        p[rows, targets] -= 1.0
        scale = float(g) / mat.shape[0] if reduction == "mean" else float(g)
        grad = p * scale
        _accumulate(logits, grad[0] if squeeze else grad)

    return _node(np.asarray(total, dtype=mat.dtype), (logits,), rule)


# -- reductions -----------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.data.shape))

    return _node(np.asarray(out), (x,), rule)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(x, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first argmax per slice."""
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError(f"max over empty axis {axis} of shape {x.shape}")
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def rule(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, grad)

    return _node(out, (x,), rule)


# -- shape ops ------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def rule(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _node(out, (x,), rule)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def rule(g):
        _accumulate(x, np.transpose(g, inverse))

    return _node(out, (x,), rule)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _as_tensor(x)

    def rule(g):
        _accumulate(x, np.swapaxes(g, a, b))

    return _node(np.swapaxes(x.data, a, b), (x,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def rule(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(slicer)])
            offset += size

    return _node(out, tuple(tensors), rule)


def select(x, index: int, axis: int) -> Tensor:
    """Pick one slice along ``axis``, dropping that axis."""
    x = _as_tensor(x)
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise DimensionError(f"index {index} out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, index, axis=axis)

    def rule(g):
        grad = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        _accumulate(x, grad)

    return _node(out, (x,), rule)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    x = _as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of shape {x.shape}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, start + length)
    out = x.data[tuple(slicer)]

    def rule(g):
        grad = np.zeros_like(x.data)
        grad[tuple(slicer)] = g
        _accumulate(x, grad)

    return _node(out, (x,), rule)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = np.broadcast_to(x.data, shape)

    def rule(g):
        _accumulate(x, _unbroadcast(g, x.data.shape))

    return _node(out, (x,), rule)
