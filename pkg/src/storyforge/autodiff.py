"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just enough machinery for a small transformer: broadcast arithmetic, matmul,
row/column slicing and concatenation, layer norm, gelu, and a masked softmax
whose masked positions receive exactly zero weight.  Gradients are only
tracked through tensors created with ``requires_grad=True`` (adapter
parameters); everything else stays a constant and costs no backward work.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "matmul",
    "transpose",
    "rows",
    "cols",
    "concat_rows",
    "concat_cols",
    "mul_mask_rows",
    "layernorm",
    "gelu",
    "masked_softmax",
    "sum_all",
    "mean_all",
    "backward",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul_scalar(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward_fn)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def backward_fn(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Shaping
# ---------------------------------------------------------------------------


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _make(a.data[start:stop], (a,), backward_fn)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full)

    return _make(a.data[:, start:stop], (a,), backward_fn)


def concat_rows(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[offset : offset + size])
            offset += size

    return _make(np.concatenate([p.data for p in parts], axis=0),
                 tuple(parts), backward_fn)


def concat_cols(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[1] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[:, offset : offset + size])
            offset += size

    return _make(np.concatenate([p.data for p in parts], axis=1),
                 tuple(parts), backward_fn)


def mul_mask_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out rows where ``mask`` is 0 (mask is a constant vector)."""
    m = mask.reshape(-1, 1)

    def backward_fn(g):
        _accum(a, g * m)

    return _make(a.data * m, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner))

    return _make(out, (a,), backward_fn)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        _accum(beta, _unbroadcast(g, beta.data.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if a.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(a, dx)
            del n

    return _make(out, (a, gamma, beta), backward_fn)


def masked_softmax(logits: Tensor, allowed: np.ndarray) -> Tensor:
    """Row-wise softmax with masked positions at exactly zero weight.

    Disallowed logits are treated as -inf before the softmax, which is the
    standard pre-softmax masking; each row must allow at least one key.
    """
    masked = np.where(allowed, logits.data, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    p = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(logits, p * (g - dot))

    return _make(p, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions and the backward pass
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(), (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward_fn(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(a.data.mean(), (a,), backward_fn)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every contributing tensor."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
