"""Dense tensor engine with reverse-mode differentiation.

Every array op used by the encoders and losses is a primitive here with a
hand-written adjoint. Gradients are checked against central differences by
grad_check, which is the oracle the rest of the package leans on.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPS_REL = 1e-8  # floor in the relative-error denominator of grad_check


class Tensor:
    """A dense array plus the bookkeeping reverse mode needs.

    requires_grad=False leaves (constants, frozen parameters) never receive
    a .grad; requires_grad propagates through ops like torch's.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
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

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _make(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dims broadcast numpy-style. Operands must be >=2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(data, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / data)

    return _make(data, (a,), bwd)


def pow_(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), bwd)


def maximum_scalar(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); used as the epsilon floor under normalizations."""
    data = np.maximum(a.data, c)

    def bwd(g):
        _accum(a, g * (a.data > c))

    return _make(data, (a,), bwd)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        _accum(a, _expand_reduced(g, a.shape, axis, keepdims))

    return _make(data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size // data.size

    def bwd(g):
        _accum(a, _expand_reduced(g, a.shape, axis, keepdims) / n)

    return _make(data, (a,), bwd)


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof=0) along axis."""
    mu = a.data.mean(axis=axis, keepdims=True)
    data = ((a.data - mu) ** 2).mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size // data.size

    def bwd(g):
        ge = _expand_reduced(g, a.shape, axis, keepdims)
        _accum(a, ge * 2.0 * (a.data - mu) / n)

    return _make(data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), bwd)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-24) -> Tensor:
    """Rows scaled to unit L2 norm along axis (eps keeps zero rows finite)."""
    sq = sum_(mul(a, a), axis=axis, keepdims=True)
    denom = sqrt(add(sq, _wrap(eps)))
    return div(a, denom)


def slice_(a: Tensor, idx) -> Tensor:
    """Basic slicing (slices/ints); gradient scatters back into place."""
    data = a.data[idx]

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _make(data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            _accum(t, g[tuple(sl)])
            start += size

    return _make(data, tuple(tensors), bwd)


def embedding(w: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather w[ids]; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    data = w.data[ids]

    def bwd(g):
        if not w.requires_grad:
            return
        if w.grad is None:
            w.grad = np.zeros_like(w.data)
        np.add.at(w.grad, ids, g)

    return _make(data, (w,), bwd)


def dropout(a: Tensor, rate: float, seed: int) -> Tensor:
    """Inverted dropout with a deterministic mask; rate=0 is the identity."""
    if rate < 0.0 or rate >= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = np.random.default_rng(seed).random(a.shape) >= rate
    keep = mask / (1.0 - rate)
    data = a.data * keep

    def bwd(g):
        _accum(a, g * keep)

    return _make(data, (a,), bwd)


# ------------------------------------------------------------ graph traversal

def trace(root: Tensor) -> list[Tensor]:
    """Topological order of every node root depends on (iterative DFS)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; visits each node exactly once."""
    if root.data.size != 1:
        raise ValueError("backward expects a scalar root")
    if not root.requires_grad:
        raise ValueError("root does not require grad; nothing to differentiate")
    order = trace(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------- grad checker

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() grads and central differences.

    f rebuilds the graph from `params` on every call and must be deterministic
    (fix any dropout seeds inside it). Relative error per coordinate is
    |analytic - numeric| / max(EPS_REL, |analytic| + |numeric|).
    """
    zero_grads(params)
    out = f()
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(ana_flat[i] - numeric) / max(EPS_REL, abs(ana_flat[i]) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst
