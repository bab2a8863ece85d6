"""Minimal dense-tensor reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps a value buffer plus an optional gradient; ops record parent
links and a backward closure, and `backward(loss)` replays them in reverse
topological order. Everything is 64-bit: desk-scale model sizes make memory
irrelevant and the finite-difference checks need the headroom.

Softmax-family ops subtract the row max before exponentiating; losses built
on log_softmax / log_sigmoid therefore never form exp overflows.
"""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteInput, NonScalarLoss, ShapeMismatch

__all__ = [
    "Tensor", "backward", "grad_check", "add", "sub", "mul", "scale",
    "matmul", "exp", "log", "softmax", "log_softmax", "sigmoid",
    "log_sigmoid", "tanh", "gelu", "tensor_sum", "tensor_mean", "transpose",
    "reshape", "concat", "l2_normalize", "layer_norm",
]


class Tensor:
    """float64 array with an optional grad buffer and graph back-links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar; wrapping constants keeps loss code readable
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{op}: input contains non-finite values")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b))
    def back(g):
        _accum(a, g)
        _accum(b, g)
    out._backward = back
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, _parents=(a, b))
    def back(g):
        _accum(a, g)
        _accum(b, -g)
    out._backward = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b))
    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    out._backward = back
    return out


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    out = Tensor(a.data * alpha, _parents=(a,))
    out._backward = lambda g: _accum(a, g * alpha)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    vec = a.data.ndim == 1
    if b.data.ndim < 2 or (vec and b.data.ndim != 2) \
            or (not vec and a.data.ndim < 2) \
            or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b))
    def back(g):
        if vec:
            _accum(a, np.matmul(g, b.data.T))
            _accum(b, np.outer(a.data, g))
        else:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
    out._backward = back
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, _parents=(a,))
    out._backward = lambda g: _accum(a, g * e)
    return out


def log(a: Tensor) -> Tensor:
    _require_finite(a.data, "log")
    if np.any(a.data <= 0):
        raise NonFiniteInput("log: input must be strictly positive")
    out = Tensor(np.log(a.data), _parents=(a,))
    out._backward = lambda g: _accum(a, g / a.data)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(a,))
    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))
    out._backward = back
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, _parents=(a,))
    def back(g):
        sm = np.exp(y)
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))
    out._backward = back
    return out


def sigmoid(a: Tensor) -> Tensor:
    # piecewise form avoids exp overflow on large |x|
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y, _parents=(a,))
    out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                 x - np.log1p(np.exp(-np.abs(x))))
    out = Tensor(y, _parents=(a,))
    def back(g):
        # d/dx log σ(x) = σ(−x)
        s = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
                     1.0 / (1.0 + np.exp(-np.abs(x))))
        _accum(a, g * s)
    out._backward = back
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, _parents=(a,))
    out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), _parents=(a,))
    def back(g):
        di = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * di))
    out._backward = back
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))
    out._backward = back
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), _parents=(a,))
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)
    out._backward = back
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes), _parents=(a,))
    inv = None if axes is None else np.argsort(axes)
    out._backward = lambda g: _accum(a, np.transpose(g, inv))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def take(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], _parents=(a,))
    def back(g):
        if not (a.requires_grad or a._parents):
            return
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)
    out._backward = back
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    out._backward = back
    return out


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm rows along `axis`; zero rows stay zero with zero gradient."""
    n = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    nonzero = n > 0
    safe = np.where(nonzero, n, 1.0)
    y = a.data / safe
    out = Tensor(y, _parents=(a,))
    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, np.where(nonzero, (g - y * dot) / safe, 0.0))
    out._backward = back
    return out


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along `axis` (no affine; compose scale/shift externally)."""
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat, _parents=(a,))
    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - xhat * gx))
    out._backward = back
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of everything `loss` depends on. Loss must be scalar."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}, expected a scalar")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, params, h: float = 1e-5) -> float:
    """Max relative error between backward() grads and central differences.

    `f` re-runs the forward pass from the current parameter values and
    returns the scalar loss Tensor. Error per coordinate is
    |analytic − numeric| / max(1, |analytic|, |numeric|); non-finite
    anywhere reports +inf.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + h
            f_plus = float(f().data)
            p.data[idx] = keep - h
            f_minus = float(f().data)
            p.data[idx] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not (np.isfinite(numeric) and np.isfinite(ana[idx])):
                return float("inf")
            err = abs(ana[idx] - numeric) / max(1.0, abs(ana[idx]), abs(numeric))
            worst = max(worst, err)
    return worst
