"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the primitives needed by the detector, the explainer and the attacks are
provided. A :class:`Tape` records every primitive applied to its tensors, in
execution order, so the backward sweep is a single reverse pass over the
record list.

    >>> tape = Tape()
    >>> x = tape.watch([1.0, 2.0])
    >>> loss = sum_(mul(x, x))
    >>> grad(loss, x).values
    array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EmptyNeighborhoodError, NonFiniteError, ProvenanceError

Array = np.ndarray


class Tensor:
    """Immutable float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("_data", "tape", "index")

    def __init__(self, values, tape: "Tape | None" = None, index: int | None = None, *, _copy: bool = True):
        data = np.array(values, dtype=np.float64) if _copy else np.asarray(values, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {data.shape}")
        data.flags.writeable = False
        self._data = data
        self.tape = tape
        self.index = index

    @property
    def values(self) -> Array:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> Array:
        """A writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def __repr__(self) -> str:
        where = "" if self.tape is None else f", node={self.index}"
        return f"Tensor(shape={self.shape}{where})"

    # operator sugar; the functions below do the work
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    inputs: tuple[int | None, ...]
    backward: Callable[[Array], tuple[Array | None, ...]]


@dataclass
class Tape:
    """Ordered log of primitive applications.

    Node ids are positions in ``records``; leaves created by :meth:`watch`
    get a record with no inputs. Because a record is appended only after its
    inputs exist, the list is already in topological order.
    """

    records: list[_Record] = field(default_factory=list)

    def watch(self, values) -> Tensor:
        """Register ``values`` as a differentiable leaf."""
        data = values.values if isinstance(values, Tensor) else values
        t = Tensor(data, self, len(self.records))
        self.records.append(_Record((), lambda g: ()))
        return t

    def _record(self, out: Array, inputs: Sequence[Tensor | None], backward) -> Tensor:
        ids = tuple(None if (t is None or t.tape is None) else t.index for t in inputs)
        t = Tensor(out, self, len(self.records), _copy=False)
        self.records.append(_Record(ids, backward))
        return t

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Array]:
        if loss.tape is not self:
            raise ProvenanceError("loss was not computed on this tape")
        if loss.values.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        for w in wrt:
            if w.tape is not self:
                raise ProvenanceError(f"{w!r} did not participate in this tape")
        grads: list[Array | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.values)
        for idx in range(loss.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            rec = self.records[idx]
            if not rec.inputs:
                continue
            parts = rec.backward(g)
            for src, part in zip(rec.inputs, parts):
                if src is None or part is None:
                    continue
                grads[src] = part if grads[src] is None else grads[src] + part
        out = []
        for w in wrt:
            g = grads[w.index] if w.index <= loss.index else None
            out.append(np.zeros_like(w.values) if g is None else g)
        return out


def grad(loss: Tensor, wrt: Tensor | Sequence[Tensor]):
    """Reverse-mode gradient of scalar ``loss`` with respect to ``wrt``.

    Returns a :class:`Tensor` for a single input, a list for a sequence.
    """
    if loss.tape is None:
        raise ProvenanceError("loss is a constant; nothing was recorded")
    if isinstance(wrt, Tensor):
        return Tensor(loss.tape.gradients(loss, [wrt])[0], _copy=False)
    return [Tensor(g, _copy=False) for g in loss.tape.gradients(loss, list(wrt))]


# ----------------------------------------------------------------------------
# helpers


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ProvenanceError("operands belong to different tapes")
            tape = x.tape
    return tape


def _emit(out: Array, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out, _copy=False)
    return tape._record(out, inputs, backward)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    va, vb = a.values, b.values
    return _emit(va * vb, (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    va, vb = a.values, b.values
    out = va / vb
    return _emit(out, (a, b), lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.values, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    va = a.values
    return _emit(va * va, (a,), lambda g: (2.0 * va * g,))


def abs_(a) -> Tensor:
    """Absolute value; the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    va = a.values
    return _emit(np.abs(va), (a,), lambda g: (np.sign(va) * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    va = a.values
    return _emit(np.log(va), (a,), lambda g: (g / va,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (operands of rank >= 2)."""
    a, b = _as_tensor(a), _as_tensor(b)
    va, vb = a.values, b.values
    if va.ndim < 2 or vb.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {va.shape} and {vb.shape}")
    if va.shape[-1] != vb.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {va.shape} x {vb.shape}")

    def backward(g):
        ga = g @ np.swapaxes(vb, -1, -2)
        gb = np.swapaxes(va, -1, -2) @ g
        return _unbroadcast(ga, va.shape), _unbroadcast(gb, vb.shape)

    return _emit(va @ vb, (a, b), backward)


# ----------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.values > 0
    return _emit(np.where(pos, x.values, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    pos = x.values > 0
    scale = np.where(pos, 1.0, slope)
    return _emit(x.values * scale, (x,), lambda g: (g * scale,))


def _stable_sigmoid(v: Array) -> Array:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _stable_sigmoid(x.values)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    x = _as_tensor(x)
    v = x.values
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    s = _stable_sigmoid(v)
    return _emit(out, (x,), lambda g: (g * s,))


def activation(x, kind: str, slope: float | None = None) -> Tensor:
    """Dispatch on ``kind`` in {"relu", "leaky_relu", "sigmoid"}."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        if slope is None:
            raise ValueError("leaky_relu needs a slope")
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max_(x, axis: int) -> Tensor:
    """Max over one axis; gradient goes to the first maximal entry."""
    x = _as_tensor(x)
    v = x.values
    arg = np.argmax(v, axis=axis)
    out = np.take_along_axis(v, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(v)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([x.values for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(np.stack([x.values for x in xs], axis=axis), xs, backward)


def take(x, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (repeats allowed)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit(np.take(x.values, idx, axis=axis), (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit(np.broadcast_to(x.values, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


# ----------------------------------------------------------------------------
# attention and convolution


def masked_softmax(scores, mask, axis: int = -1, empty: str = "raise") -> Tensor:
    """Softmax over the entries of ``axis`` where ``mask`` is true.

    Masked-out entries are exactly zero. Rows with no true entry raise
    :class:`EmptyNeighborhoodError` unless ``empty="zero"``, in which case the
    whole row is zero.
    """
    scores = _as_tensor(scores)
    v = scores.values
    m = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    has_any = m.any(axis=axis, keepdims=True)
    if not has_any.all():
        if empty != "zero":
            raise EmptyNeighborhoodError("softmax mask has a row with no admissible entry")
    shifted = np.where(m, v, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(has_any, top, 0.0)
    e = np.where(m, np.exp(np.where(m, v - top, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (scores,), backward)


def conv1d_same(x, kernel) -> Tensor:
    """Forward-looking 1-D correlation along the last axis.

    ``z[t] = sum_l x[t + l] * kernel[l]``, with zeros past the end so the
    output keeps the input length.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    vx, vk = x.values, kernel.values
    if vk.ndim != 1:
        raise DimensionError("kernel must be 1-D")
    k, w = vk.shape[0], vx.shape[-1]
    if k < 1 or k > w:
        raise DimensionError(f"kernel length {k} not in [1, {w}]")
    pad = np.concatenate([vx, np.zeros(vx.shape[:-1] + (k - 1,))], axis=-1)
    out = np.zeros_like(vx)
    for l in range(k):
        out = out + vk[l] * pad[..., l:l + w]

    def backward(g):
        gpad = np.zeros_like(pad)
        gk = np.empty(k)
        for l in range(k):
            gpad[..., l:l + w] += vk[l] * g
            gk[l] = np.sum(g * pad[..., l:l + w])
        return gpad[..., :w], gk

    return _emit(out, (x, kernel), backward)


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against target."""
    logits = _as_tensor(logits)
    z = logits.values
    y = np.broadcast_to(np.asarray(target.values if isinstance(target, Tensor) else target, dtype=np.float64),
                        z.shape)
    out = np.logaddexp(0.0, z) - z * y

    def backward(g):
        # sigmoid(z) - y written so that neither term cancels for large |z|
        return (g * ((1.0 - y) * _stable_sigmoid(z) - y * _stable_sigmoid(-z)),)

    return _emit(out, (logits,), backward)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[Array]
    v: list[Array]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Array]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[Array], grads: Sequence[Array], state: AdamState, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> tuple[list[Array], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and state differ in length")
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise DimensionError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)
