"""Reverse-mode differentiation over numpy arrays.

A :class:`Value` wraps an array plus the closure that pushes its gradient to
the values it was computed from.  Only the handful of operations a small
sequential CNN needs are provided.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from acnet import tensor as T

_grad_enabled = True
_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphError(RuntimeError):
    pass


class Value:
    __slots__ = ("data", "grad", "_backward", "_prev", "op")

    def __init__(self, data, _prev=(), op=""):
        self.data = np.asarray(data)
        self.grad = None
        self._backward = None
        self._prev = _prev
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return bool(self._prev)

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape})"


class Param(Value):
    """A leaf value that receives gradients and is updated by the optimizer."""

    __slots__ = ("name", "id")

    def __init__(self, data, name=""):
        super().__init__(data)
        self.name = name
        self.id = next(_ids)
        self.grad = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return True

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def _node(data, parents, op, backward):
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Value(data)
    out = Value(data, tuple(parents), op)
    out._backward = backward
    return out


def _accumulate(v: Value, g):
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=v.data.dtype, copy=True)
    else:
        v.grad += g


def backward(loss: Value):
    """Populate ``grad`` on every :class:`Param` reachable from scalar ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no parameter contributes to it")

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v._prev:
            if id(p) not in seen:
                stack.append((p, False))

    for v in order:
        if not isinstance(v, Param):
            v.grad = None
    loss.grad = np.ones_like(loss.data)
    for v in reversed(order):
        if v._backward is not None and v.grad is not None:
            v._backward(v.grad)


# -- operations -------------------------------------------------------------


def constant(x) -> Value:
    return Value(x)


def conv2d(x: Value, w: Value, geom: T.ConvGeometry, bias: Value | None = None) -> Value:
    out = T.conv2d(x.data, T.FilterBank(w.data, None if bias is None else bias.data), geom)
    parents = (x, w) if bias is None else (x, w, bias)

    def _backward(g):
        if w.requires_grad:
            _accumulate(w, T.conv2d_grad_weights(x.data, g, w.data.shape[2:], geom))
        if x.requires_grad:
            _accumulate(x, T.conv2d_grad_input(g, w.data, x.data.shape, geom))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _node(out, parents, "conv2d", _backward)


def shift2d(x: Value, dy: int, dx: int) -> Value:
    def _backward(g):
        _accumulate(x, T.shift2d(g, -dy, -dx))

    return _node(T.shift2d(x.data, dy, dx), (x,), "shift2d", _backward)


def add(*xs: Value) -> Value:
    out = xs[0].data.copy()
    for x in xs[1:]:
        out = out + x.data

    def _backward(g):
        for x in xs:
            _accumulate(x, g)

    return _node(out, xs, "add", _backward)


def relu(x: Value) -> Value:
    mask = x.data > 0

    def _backward(g):
        _accumulate(x, g * mask)

    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu", _backward)


def total(x: Value) -> Value:
    def _backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(x.data.sum(), (x,), "sum", _backward)


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    """``x`` (n, f) times ``w`` (out, f) transposed, plus ``b``."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def _backward(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        if b is not None:
            _accumulate(b, g.sum(axis=0))

    return _node(out, parents, "linear", _backward)


def global_avg_pool(x: Value) -> Value:
    n, c, h, w = x.data.shape

    def _backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _node(x.data.mean(axis=(2, 3)), (x,), "gap", _backward)


def flatten(x: Value) -> Value:
    shape = x.data.shape

    def _backward(g):
        _accumulate(x, g.reshape(shape))

    return _node(x.data.reshape(shape[0], -1), (x,), "flatten", _backward)


def max_pool(x: Value, k: int, s: int) -> Value:
    n, c, h, w = x.data.shape
    if h < k or w < k:
        raise T.ShapeError(f"max-pool window {k} exceeds input extent {h}x{w}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    r, t = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, r, t, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gx = np.zeros_like(x.data)
        ii = np.arange(r)[:, None] * s + arg // k
        jj = np.arange(t)[None, :] * s + arg % k
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn_, cc, ii, jj), g)
        _accumulate(x, gx)

    return _node(np.ascontiguousarray(out), (x,), "maxpool", _backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def _backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        _accumulate(logits, g * p / n)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), "xent", _backward)


@dataclass(eq=False)
class BatchNormState:
    """Per-channel batch normalization with a learned affine transform."""

    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    name: str = field(default="bn")

    @classmethod
    def create(cls, channels: int, dtype=np.float64, eps=1e-5, momentum=0.1, name="bn"):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        return cls(
            Param(np.ones(channels, dtype), f"{name}.gamma"),
            Param(np.zeros(channels, dtype), f"{name}.beta"),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            eps,
            momentum,
            name,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def std(self) -> np.ndarray:
        """Inference-time standard deviation sqrt(running_var + eps)."""
        return np.sqrt(self.running_var + self.eps)

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]


def batch_norm(x: Value, bn: BatchNormState, train: bool) -> Value:
    data = x.data
    if data.shape[1] != bn.channels:
        raise T.ShapeError(f"batch norm over {bn.channels} channels got input with {data.shape[1]}")
    gamma, beta = bn.gamma.data, bn.beta.data
    axes = (0, 2, 3)
    bc = (None, slice(None), None, None)

    if train:
        m = data.shape[0] * data.shape[2] * data.shape[3]
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = (data - mean[bc]) * inv[bc]
        unbiased = var * m / max(m - 1, 1)
        bn.running_mean[:] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
        bn.running_var[:] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased

        def _backward(g):
            _accumulate(bn.gamma, (g * xhat).sum(axis=axes))
            _accumulate(bn.beta, g.sum(axis=axes))
            if x.requires_grad:
                gh = g * gamma[bc]
                gx = inv[bc] / m * (
                    m * gh - gh.sum(axis=axes)[bc] - xhat * (gh * xhat).sum(axis=axes)[bc]
                )
                _accumulate(x, gx)
    else:
        inv = 1.0 / bn.std()
        xhat = (data - bn.running_mean[bc]) * inv[bc]

        def _backward(g):
            _accumulate(bn.gamma, (g * xhat).sum(axis=axes))
            _accumulate(bn.beta, g.sum(axis=axes))
            _accumulate(x, g * (gamma * inv)[bc])

    out = (xhat * gamma[bc] + beta[bc]).astype(data.dtype)
    return _node(out, (x, bn.gamma, bn.beta), "batchnorm", _backward)


def finite_diff_check(param: Param, loss_fn, h: float = 1e-5, max_coords: int | None = 64,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic and central-difference gradients of ``loss_fn`` for ``param``.

    ``loss_fn`` is called with no arguments and must return a scalar
    :class:`Value` that depends on ``param``.  Returns the maximum relative
    error over the sampled coordinates (all of them when ``max_coords`` is
    None).  Run in float64; float32 round-off swamps any useful step size.
    """
    for_grad = loss_fn()
    param.zero_grad()
    backward(for_grad)
    analytic = param.grad.copy()

    flat = param.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
