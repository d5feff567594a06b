"""Dense float64 tensors with reverse-mode differentiation.

Only what the captioning transformer and its two training objectives need.
Broadcasting is limited to leading axes: an operand may be missing leading
axes relative to the other (a ``[d]`` bias added to ``[B, n, d]``), and the
gradient is summed back over them.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording a graph (decoding, validation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading axes")


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable ``requires_grad`` tensor."""
    if root.values.size != 1 or root.ndim != 0:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.values + b.values, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _node(a.values * b.values, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.values * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _node(-a.values, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _node(a.values * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.values), (a,), lambda g: (g / a.values,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.values * keep, (a,), lambda g: (g * keep,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` (broadcastable to ``a``) is True."""
    mask = np.broadcast_to(mask, a.shape)
    out = np.where(mask, value, a.values)
    return _node(out, (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    return _node(np.sum(a.values), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    return _node(np.mean(a.values), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _node(a.values.sum(axis=axis), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``a`` along new leading axes ``lead``."""
    shape = tuple(lead) + a.shape
    return _node(np.broadcast_to(a.values, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.values for t in tensors], axis=axis), tensors, bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather along the first axis (embedding lookup, row repeats) with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.values[ids], (table,), bw)


def pick_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """``out[...] = a[..., ids[...]]``, gathering one entry along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick_last: ids {ids.shape} vs tensor {a.shape}")
    out = np.take_along_axis(a.values, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may omit leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError(f"matmul: left operand {a.shape} has fewer axes than {b.shape}")
    if b.ndim > 2 and a.shape[: a.ndim - 2][-(b.ndim - 2):] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ")

    def bw(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _node(a.values @ b.values, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.values)):
        raise FloatingPointError("softmax received non-finite input")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.values)):
        raise FloatingPointError("log_softmax received non-finite input")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def bw(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.values
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _node(out, (x, gain, bias), bw)
