"""Dense arrays with tape-free reverse-mode differentiation.

Every primitive returns a :class:`Node` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Arrays are stored
in float32 by default; reductions accumulate in float64.  Leading batch
dimensions are accepted wherever the operation is row-wise.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype for newly created arrays."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Node:
    """A value in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=default_dtype()) if not isinstance(value, np.ndarray) else value
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other, self))

    @property
    def T(self):
        return transpose(self)

    def zero_grad(self) -> None:
        self.grad = None


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return constant(np.asarray(x, dtype=like.value.dtype))


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=default_dtype()), requires_grad=True, name=name)


def constant(value) -> Node:
    arr = np.asarray(value)
    if arr.dtype.kind != "f":
        arr = arr.astype(default_dtype())
    return Node(arr)


def _make(value: np.ndarray, parents: Sequence[Node], backward: Callable) -> Node:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, backward)
    return Node(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    out = np.matmul(av, bv)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def add(a: Node, b: Node) -> Node:
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    av, bv = a.value, b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * a.value.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def tanh_elem(a: Node) -> Node:
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    if a.value.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum_all(a: Node) -> Node:
    total = np.asarray(a.value.sum(dtype=np.float64), dtype=a.value.dtype)
    src = a.shape
    return _make(total, (a,), lambda g: (np.broadcast_to(g, src).astype(g.dtype),))


def mean_rows(a: Node) -> Node:
    """Mean over the row axis (second to last), keeping it as size 1."""
    n = a.shape[-2]
    out = (a.value.sum(axis=-2, keepdims=True, dtype=np.float64) / n).astype(a.value.dtype)
    src = a.shape
    return _make(out, (a,), lambda g: (np.broadcast_to(g / g.dtype.type(n), src).copy(),))


def softmax_rows(a: Node) -> Node:
    x = a.value
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - inner),)

    return _make(y, (a,), backward)


def layer_norm_rows(a: Node, eps: float = 1e-5) -> Node:
    """Normalise each row to zero mean and unit variance (no affine part)."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((x - mu) * inv).astype(x.dtype)
    inv = inv.astype(x.dtype)

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True, dtype=np.float64)
        gym = (g * y).mean(axis=-1, keepdims=True, dtype=np.float64)
        return ((inv * (g - gm - y * gym)).astype(g.dtype),)

    return _make(y, (a,), backward)


def gather_rows(a: Node, idx) -> Node:
    """Select rows of a 2-D node; repeated indices are allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D node, got {a.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")
    src = a.shape

    def backward(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), backward)


def pooling_matrix(seg_ids, weights, n_segments: int | None = None) -> sp.csr_matrix:
    """Row-normalised sparse matrix P with (P @ a)[s] = weighted mean of segment s."""
    seg = np.asarray(seg_ids, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if seg.shape != w.shape or seg.ndim != 1:
        raise ShapeError(f"segment ids {seg.shape} and weights {w.shape} must be equal 1-D")
    if n_segments is None:
        n_segments = int(seg.max()) + 1 if seg.size else 0
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise IndexError("segment id out of range")
    if np.any(~(w > 0)):
        raise DomainError("segment weights must be strictly positive")
    totals = np.bincount(seg, weights=w, minlength=n_segments)
    if np.any(totals == 0):
        raise DomainError("empty segment in segment_mean")
    return sp.csr_matrix((w / totals[seg], (seg, np.arange(seg.size))), shape=(n_segments, seg.size))


def segment_mean(a: Node, seg_ids, weights=None, n_segments: int | None = None) -> Node:
    """Weighted mean of the rows of ``a`` sharing a segment id."""
    if a.value.ndim != 2:
        raise ShapeError(f"segment_mean expects a 2-D node, got {a.shape}")
    seg = np.asarray(seg_ids)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"{seg.shape[0]} segment ids for {a.shape[0]} rows")
    if weights is None:
        weights = np.ones(seg.shape[0])
    P = pooling_matrix(seg, weights, n_segments)
    dtype = a.value.dtype
    out = np.asarray(P @ a.value.astype(np.float64)).astype(dtype)
    PT = P.T.tocsr()
    return _make(out, (a,), lambda g: (np.asarray(PT @ g.astype(np.float64)).astype(dtype),))


def dropout(a: Node, rate: float, rng: np.random.Generator | None, training: bool) -> Node:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return a
    keep = rng.random(a.shape) >= rate
    mask = keep.astype(a.value.dtype) / a.value.dtype.type(1.0 - rate)
    return mul(a, constant(mask))


def attention_core(q: Node, k: Node, v: Node, bias: Node | None, scale: float) -> Node:
    """softmax((q k^T + bias) * scale) v over (G, heads, n, d) blocks.

    ``bias`` has shape (G, n) and is added to every logit aimed at key j.
    Fused so the (n x n) weights are materialised once.
    """
    qv, kv, vv = q.value, k.value, v.value
    if qv.ndim != 4 or qv.shape != kv.shape or kv.shape[:3] != vv.shape[:3]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    g, h, n, _ = qv.shape
    dt = qv.dtype.type
    logits = np.matmul(qv, np.swapaxes(kv, -1, -2))
    if bias is not None:
        if bias.shape != (g, n):
            raise ShapeError(f"bias shape {bias.shape}, expected {(g, n)}")
        logits += bias.value[:, None, None, :]
    logits *= dt(scale)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True, dtype=np.float64).astype(qv.dtype)
    weights = logits
    out = np.matmul(weights, vv)
    parents = (q, k, v) if bias is None else (q, k, v, bias)

    def backward(gout):
        gv = np.matmul(np.swapaxes(weights, -1, -2), gout)
        gz = np.matmul(gout, np.swapaxes(vv, -1, -2))
        inner = np.einsum("...ij,...ij->...i", gz, weights)[..., None]
        gz -= inner
        gz *= weights
        gz *= dt(scale)
        gq = np.matmul(gz, kv)
        gk = np.matmul(np.swapaxes(gz, -1, -2), qv)
        if bias is None:
            return gq, gk, gv
        return gq, gk, gv, gz.sum(axis=(1, 2), dtype=np.float64).astype(qv.dtype)

    return _make(out, parents, backward)


def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy over the rows of a (B, K) node."""
    labels = np.asarray(labels, dtype=np.int64)
    x = logits.value
    b = x.shape[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, dtype=np.float64))
    loss = (lse - shifted[np.arange(b), labels]).mean()
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        grad = probs.copy()
        grad[np.arange(b), labels] -= 1.0
        return ((grad * (g / b)).astype(x.dtype),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def mse(pred: Node, target) -> Node:
    target = np.asarray(target, dtype=pred.value.dtype).reshape(pred.shape)
    diff = pred.value - target
    loss = np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=pred.value.dtype)
    n = diff.size
    return _make(loss, (pred,), lambda g: ((2.0 / n) * g * diff,))


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` on every node reachable from a scalar root."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.value.dtype).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g
    for node in order:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
