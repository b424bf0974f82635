"""Reverse-mode gradient tape over a small, fixed vocabulary of array ops.

Every :class:`Tensor` belongs to one :class:`GradTape`. Nodes are recorded in
creation order, which is a valid topological order, so the backward pass is a
single reversed walk. Only nodes that depend on a registered parameter are
recorded; frozen inputs enter as constants and never receive a gradient.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError, UsageError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "tape", "_backward", "name")

    def __init__(self, value, tape: "GradTape", requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self.tape.lift(other)))

    def __rsub__(self, other):
        return add(self.tape.lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Records one forward pass and replays it backwards exactly once."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self._done = False

    def parameter(self, name: str, value) -> Tensor:
        if name in self.params:
            raise UsageError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(value, dtype=np.float64), self, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise UsageError("tensor belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, value, parents, backward) -> Tensor:
        req = any(p.requires_grad for p in parents)
        out = Tensor(value, self, requires_grad=req)
        if req:
            out._backward = backward
            self.nodes.append(out)
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise UsageError("loss is not a node of this tape")
        if self._done:
            raise UsageError("backward already ran on this tape; record a new forward pass")
        if loss.value.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")
        self._done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
            node._backward = None
        # nodes point back at the tape; dropping the list lets refcounting free activations now
        self.nodes = []
        out = {}
        for name, p in self.params.items():
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.value)
        return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.value else g
    else:
        t.grad = t.grad + g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, a.tape.lift(b)
    return b.tape.lift(a), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return a.tape.record(a.value + b.value, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return a.tape.record(-a.value, (a,), lambda g: _acc(a, -g))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return a.tape.record(a.value * b.value, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise InvalidArgumentError("matmul operands must be at least 2-D")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    return a.tape.record(a.value @ b.value, (a, b), bw)


def outer(u: Tensor, v: Tensor) -> Tensor:
    def bw(g):
        if u.requires_grad:
            _acc(u, g @ v.value)
        if v.requires_grad:
            _acc(v, u.value @ g)

    return u.tape.record(np.outer(u.value, v.value), (u, v), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return a.tape.record(
        np.broadcast_to(a.value, shape).copy(), (a,), lambda g: _acc(a, _unbroadcast(g, a.value.shape))
    )


def concat(tensors, axis: int) -> Tensor:
    tensors = [t for t in tensors if t.value.shape[axis] > 0] or tensors[:1]
    if len(tensors) == 1:
        return tensors[0]
    tape = tensors[0].tape
    sizes = [t.value.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return tape.record(np.concatenate([t.value for t in tensors], axis=axis), tensors, bw)


def reshape(a: Tensor, shape) -> Tensor:
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: _acc(a, g.reshape(a.value.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return a.tape.record(np.transpose(a.value, axes), (a,), lambda g: _acc(a, np.transpose(g, inv)))


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Pick a single position along ``axis`` (the axis is dropped)."""

    def bw(g):
        full = np.zeros_like(a.value)
        idx = [slice(None)] * a.value.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _acc(a, full)

    return a.tape.record(np.take(a.value, index, axis=axis), (a,), bw)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids)

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        _acc(table, full)

    return table.tape.record(table.value[ids], (table,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g: _acc(a, g * mask))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))``, evaluated stably."""
    x = a.value
    val = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return a.tape.record(val, (a,), lambda g: _acc(a, g * sig))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return a.tape.record(y, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = v.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            _acc(gamma, _unbroadcast(g * xhat, gamma.value.shape))
        if beta.requires_grad:
            _acc(beta, _unbroadcast(g, beta.value.shape))
        if x.requires_grad:
            dxh = g * gamma.value
            _acc(
                x,
                inv / n * (n * dxh - dxh.sum(axis=-1, keepdims=True) - xhat * (dxh * xhat).sum(axis=-1, keepdims=True)),
            )

    return x.tape.record(xhat * gamma.value + beta.value, (x, gamma, beta), bw)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return a.tape.record(np.asarray(a.value.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum(a, axis) * (1.0 / n)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    k = logits.value.shape[-1]
    if labels.ndim != 1 or labels.shape[0] != logits.value.shape[0]:
        raise InvalidArgumentError("labels must be a vector matching the batch size")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    logp = _log_softmax(logits.value)
    b = labels.shape[0]
    val = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        _acc(logits, g * p / b)

    return logits.tape.record(np.asarray(val), (logits,), bw)


def kl_from_logits(logits: Tensor, p_old: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Mean over rows of ``KL(softmax(logits) || p_old)``; ``p_old`` is a constant."""
    logp = _log_softmax(logits.value)
    p = np.exp(logp)
    logq = np.log(np.maximum(p_old, floor))
    diff = logp - logq
    val = (p * diff).sum(axis=-1).mean()
    b = logits.value.shape[0]

    def bw(g):
        _acc(logits, g * p * (diff - (p * diff).sum(axis=-1, keepdims=True)) / b)

    return logits.tape.record(np.asarray(val), (logits,), bw)
