"""Minimal reverse-mode differentiation over dense float64 arrays.

Only the handful of operations the unmixing network needs are provided.
Every op checks its output for NaN/Inf and raises ``NonFiniteError``.
Backward visits recorded nodes in reverse creation order, which is a valid
reverse topological order because a node is always created after its inputs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError, TrainingError, UsageError

_node_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes or not node.requires_grad:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)

        pending = {self._id: grad}
        for node in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent._id)
                pending[parent._id] = pg if prev is None else prev + pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit generator")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) >= rate) / keep
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- linear algebra and shape -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _node(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take_rows(a: Tensor, index) -> Tensor:
    """Select entries along axis 0."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward, "take_rows")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),), "mean")


# -- normalizations -----------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row maximum."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (a,), backward, "softmax")


def l1_normalize(a: Tensor, eps: float) -> Tensor:
    """x / (||x||_1 + eps) along the last axis."""
    x = a.data
    denom = np.abs(x).sum(axis=-1, keepdims=True) + eps
    y = x / denom

    def backward(g):
        inner = np.sum(g * x, axis=-1, keepdims=True)
        return (g / denom - np.sign(x) * inner / denom**2,)

    return _node(y, (a,), backward, "l1_normalize")


@dataclass
class BatchNormState:
    """Running statistics used by batch-norm in inference mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize the columns of an N x F matrix.

    Training mode uses batch statistics and folds them into ``state`` as
    ``running = momentum * running + (1 - momentum) * batch``; inference
    mode uses the running values.
    """
    if x.data.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs {gamma.shape[0]} features")
    eps = state.eps
    if not training:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean) * inv
        out = xhat * gamma.data + beta.data

        def backward(g):
            return g * gamma.data * inv, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

        return _node(out, (x, gamma, beta), backward, "batch_norm")

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    m = state.momentum
    state.mean = m * state.mean + (1.0 - m) * mu
    state.var = m * state.var + (1.0 - m) * var

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _node(out, (x, gamma, beta), backward, "batch_norm")


# -- losses -------------------------------------------------------------------

def sad(a: Tensor, b: Tensor) -> Tensor:
    """Spectral angle in radians between vectors along the last axis.

    Raises ``DomainError`` if any vector is zero. The cosine is clamped to
    [-1, 1]; where the clamp is active the gradient is set to zero.
    """
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"sad: shapes {a.shape} and {b.shape} do not conform")
    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("sad: spectral angle undefined for a zero vector")
    cos = np.sum(a.data * b.data, axis=-1, keepdims=True) / (na * nb)
    cos_c = np.clip(cos, -1.0, 1.0)
    theta = np.arccos(cos_c)[..., 0]

    def backward(g):
        inside = np.abs(cos_c) < 1.0
        dtheta = np.where(inside, -1.0 / np.sqrt(np.where(inside, 1.0 - cos_c**2, 1.0)), 0.0)
        dtheta = dtheta * np.expand_dims(g, -1)
        ga = dtheta * (b.data / (na * nb) - cos * a.data / na**2)
        gb = dtheta * (a.data / (na * nb) - cos * b.data / nb**2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(theta, (a, b), backward, "sad")


def l_half(v: Tensor) -> Tensor:
    """Sum of square roots along the last axis; subgradient 0 at exactly 0."""
    if np.any(v.data < 0):
        raise DomainError("l_half: negative entry")
    root = np.sqrt(v.data)
    pos = v.data > 0

    def backward(g):
        d = np.where(pos, 0.5 / np.where(pos, root, 1.0), 0.0)
        return (np.expand_dims(g, -1) * d,)

    return _node(root.sum(axis=-1), (v,), backward, "l_half")


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state lengths differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("adam_step: non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- validation ---------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    The gap per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``. ``f`` must be
    deterministic (re-seed any dropout generator inside it).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    g_fd = np.empty_like(x0)
    flat = g_fd.reshape(-1)
    for k in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[k] += h
        xm[k] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        flat[k] = (fp - fm) / (2.0 * h)
    err = np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
