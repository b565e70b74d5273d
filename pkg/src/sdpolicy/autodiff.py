"""Reverse-mode autodiff on float64 numpy arrays.

Small op set sized for encoder+MLP nets and the training objectives:
affine (matmul/add), relu/tanh/sigmoid, embedding lookup, masked mean-pool,
concatenate, exp/log, log-sum-exp, elementwise arithmetic, reductions, clip,
and a differentiable binary-concrete sampler. Everything is float64; every op
output is checked for NaN/Inf while the global check flag is on.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericFault, ShapeError

_NAN_CHECKS = True


def set_nan_checks(on: bool) -> bool:
    """Toggle the per-op NaN/Inf detection hook; returns the previous setting."""
    global _NAN_CHECKS
    prev = _NAN_CHECKS
    _NAN_CHECKS = bool(on)
    return prev


def _check_finite(arr, op_name):
    if _NAN_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericFault(op_name)


class Tensor:
    """A node in the computation graph: value, accumulated grad, backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this node; grads accumulate into .grad of each node."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward: implicit seed requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        topo = []
        visited = set()
        stack = [(self, iter(self._parents))]
        visited.add(id(self))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in visited and p.requires_grad:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return powi(self, exponent)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, *, name=None) -> Tensor:
    t = Tensor(data, requires_grad=True, op=name or "param")
    return t


def _accum(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad, shape):
    """Sum grad over the axes numpy broadcast to reach grad.shape from shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _binary(op_name, a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op_name}: {a.data.shape} vs {b.data.shape} ({exc})") from None
    _check_finite(out, op_name)
    req = a.requires_grad or b.requires_grad
    if not req:
        return Tensor(out, op=op_name)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(da(g, a.data, b.data, out), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(db(g, a.data, b.data, out), b.data.shape))

    return Tensor(out, requires_grad=True, op=op_name, _parents=(a, b), _backward=backward)


def _unary(op_name, a, fwd, da):
    a = as_tensor(a)
    out = fwd(a.data)
    _check_finite(out, op_name)
    if not a.requires_grad:
        return Tensor(out, op=op_name)

    def backward(g):
        _accum(a, da(g, a.data, out))

    return Tensor(out, requires_grad=True, op=op_name, _parents=(a,), _backward=backward)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def powi(a, exponent):
    e = float(exponent)
    return _unary("pow", a, lambda x: x ** e, lambda g, x, o: g * e * x ** (e - 1.0))


# -- nonlinearities --------------------------------------------------------


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))


def tanh(a):
    return _unary("tanh", a, lambda x: np.tanh(x), lambda g, x, o: g * (1.0 - o * o))


def sigmoid(a):
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda g, x, o: g * o * (1.0 - o))


def exp(a):
    return _unary("exp", a, lambda x: np.exp(x), lambda g, x, o: g * o)


def log(a):
    return _unary("log", a, lambda x: np.log(x), lambda g, x, o: g / x)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where lo <= x <= hi."""
    lo, hi = float(lo), float(hi)
    return _unary("clip", a, lambda x: np.clip(x, lo, hi),
                  lambda g, x, o: g * ((x >= lo) & (x <= hi)))


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    _check_finite(out, "matmul")
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out, op="matmul")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor(out, requires_grad=True, op="matmul", _parents=(a, b), _backward=backward)


def affine(x, w, b):
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    _check_finite(out, "concat")
    if not any(t.requires_grad for t in tensors):
        return Tensor(out, op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return Tensor(out, requires_grad=True, op="concat", _parents=tuple(tensors), _backward=backward)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    if not a.requires_grad:
        return Tensor(out, op="reshape")

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out, requires_grad=True, op="reshape", _parents=(a,), _backward=backward)


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    _check_finite(out, "sum")
    if not a.requires_grad:
        return Tensor(out, op="sum")

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return Tensor(out, requires_grad=True, op="sum", _parents=(a,), _backward=backward)


def tmean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis=None):
    """Max-shifted log(sum(exp(x))); exact for single-element input."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise DomainError("logsumexp: empty input")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze() if axis is None else np.squeeze(m + np.log(total), axis=axis)
    _check_finite(out, "logsumexp")
    if not a.requires_grad:
        return Tensor(out, op="logsumexp")
    soft = shifted / total

    def backward(g):
        if axis is None:
            _accum(a, g * soft)
        else:
            _accum(a, np.expand_dims(g, axis) * soft)

    return Tensor(out, requires_grad=True, op="logsumexp", _parents=(a,), _backward=backward)


def logmeanexp(a, axis=None):
    """logsumexp minus log(count); removes the batch-size constant."""
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return add(logsumexp(a, axis=axis), -float(np.log(n)))


# -- embedding / pooling ------------------------------------------------------


def embedding(table, indices):
    """Row gather: table (V, D) indexed by int array (..., L) -> (..., L, D)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding: index out of range for table with {table.data.shape[0]} rows")
    out = table.data[idx]
    if not table.requires_grad:
        return Tensor(out, op="embedding")

    def backward(g):
        tg = np.zeros_like(table.data)
        np.add.at(tg, idx, g)
        _accum(table, tg)

    return Tensor(out, requires_grad=True, op="embedding", _parents=(table,), _backward=backward)


def mean_pool(a, mask):
    """Masked mean over axis 1: a (B, L, D), mask (B, L) in {0,1} -> (B, D).

    All-masked rows pool to zero (count clamped to 1).
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=np.float64)
    if a.data.ndim != 3 or mask.shape != a.data.shape[:2]:
        raise ShapeError(f"mean_pool: values {a.data.shape} vs mask {mask.shape}")
    counts = np.maximum(mask.sum(axis=1), 1.0)
    weights = mask / counts[:, None]
    out = np.einsum("bl,bld->bd", weights, a.data)
    _check_finite(out, "mean_pool")
    if not a.requires_grad:
        return Tensor(out, op="mean_pool")

    def backward(g):
        _accum(a, weights[:, :, None] * g[:, None, :])

    return Tensor(out, requires_grad=True, op="mean_pool", _parents=(a,), _backward=backward)


# -- stochastic relaxation -----------------------------------------------------


def logistic_noise(shape, rng):
    """Standard logistic draws (difference of two Gumbels)."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return np.log(u) - np.log1p(-u)


def gumbel_binary_sample(probs, temperature, rng=None, noise=None):
    """Differentiable binary-concrete sample per dimension.

    Two-class Gumbel-softmax on (p, 1-p): sigmoid((logit(p) + L) / temperature)
    with L logistic. Temperature -> 0 concentrates the sample on {0, 1};
    thresholding at 0.5 recovers a Bernoulli(p) draw exactly.
    """
    if temperature <= 0:
        raise DomainError(f"gumbel_binary_sample: temperature must be > 0, got {temperature}")
    probs = as_tensor(probs)
    p = clip(probs, 1e-6, 1.0 - 1e-6)
    if noise is None:
        if rng is None:
            raise DomainError("gumbel_binary_sample: pass rng or explicit noise")
        noise = logistic_noise(p.data.shape, rng)
    logit = log(p) - log(1.0 - p)
    return sigmoid(mul(add(logit, np.asarray(noise, dtype=np.float64)), 1.0 / temperature))


# -- driver ---------------------------------------------------------------------


def zero_grads(params):
    for p in params:
        p.grad = None


def forward_backward(fn, inputs):
    """Evaluate fn(*inputs), backprop its scalar output, return (value, grads).

    Grad accumulation on the inputs is zeroed first; one backward per forward.
    """
    inputs = list(inputs)
    zero_grads(inputs)
    out = fn(*inputs)
    out.backward()
    return out.data.copy(), [t.grad for t in inputs]
