"""Multi-head self-attention, saliency scoring and saliency-biased attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

# query rows per tile when attention runs without a graph
_EVAL_TILE = 1024


@dataclass
class AttentionParams:
    U_q: Node
    U_k: Node
    U_v: Node
    U_s: Node
    heads: int = 4

    def __post_init__(self):
        c, d = self.U_q.shape
        for name in ("U_k", "U_v"):
            if getattr(self, name).shape != (c, d):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(c, d)}")
        if self.U_s.shape != (d, 1):
            raise ShapeError(f"U_s has shape {self.U_s.shape}, expected {(d, 1)}")
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"key dim {d} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.U_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def nodes(self) -> dict[str, Node]:
        return {"U_q": self.U_q, "U_k": self.U_k, "U_v": self.U_v, "U_s": self.U_s}


def init_attention(c: int, d: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    std = 1.0 / np.sqrt(c)
    return AttentionParams(
        U_q=ad.parameter(rng.normal(0.0, std, (c, d)), "U_q"),
        U_k=ad.parameter(rng.normal(0.0, std, (c, d)), "U_k"),
        U_v=ad.parameter(rng.normal(0.0, std, (c, d)), "U_v"),
        U_s=ad.parameter(rng.normal(0.0, 0.1 / np.sqrt(d), (d, 1)), "U_s"),
        heads=heads,
    )


class AttentionOutput(NamedTuple):
    out: Node
    keys: np.ndarray  # head-averaged keys used for matching
    K: Node  # full keys, input to saliency scoring


def _split_heads(x: Node, heads: int) -> Node:
    g, n, d = x.shape
    return ad.permute(ad.reshape(x, (g, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Node) -> Node:
    g, h, n, dh = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (g, n, h * dh))


def _as_batch(x: Node) -> tuple[Node, bool]:
    if x.value.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.value.ndim != 3:
        raise ShapeError(f"attention input must be N x C or G x N x C, got {x.shape}")
    return x, False


def _attend(x: Node, p: AttentionParams, bias: Node | None):
    x, squeeze = _as_batch(x)
    if x.shape[-1] != p.U_q.shape[0]:
        raise ShapeError(f"input has {x.shape[-1]} channels, projections expect {p.U_q.shape[0]}")
    q, k, v = x @ p.U_q, x @ p.U_k, x @ p.U_v
    g, n, d = q.shape
    h, dh = p.heads, p.head_dim
    scale = 1.0 / np.sqrt(dh)
    if bias is not None:
        bias, _ = _as_batch(bias)
        if bias.shape != (g, n, 1):
            raise ShapeError(f"saliency has shape {bias.shape}, expected {(g, n, 1)}")

    if not ad.grad_enabled():
        out = Node(_attend_tiled(q.value, k.value, v.value, h, None if bias is None else bias.value, scale))
    else:
        qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
        b = None if bias is None else ad.reshape(bias, (g, n))
        out = _merge_heads(ad.attention_core(qh, kh, vh, b, scale))

    keys = k.value.reshape(g, n, h, dh).mean(axis=2)
    if squeeze:
        out = ad.reshape(out, (n, d))
        k = ad.reshape(k, (n, d))
        keys = keys[0]
    return AttentionOutput(out, keys, k)


def _attend_tiled(q, k, v, heads, bias, scale):
    g, n, d = q.shape
    dh = d // heads
    qh = q.reshape(g, n, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(g, n, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(g, n, heads, dh).transpose(0, 2, 1, 3)
    out = np.empty((g, heads, n, dh), dtype=q.dtype)
    b = None if bias is None else bias.reshape(g, 1, 1, n)
    for start in range(0, n, _EVAL_TILE):
        stop = min(n, start + _EVAL_TILE)
        logits = qh[:, :, start:stop] @ kh
        if b is not None:
            logits += b
        logits *= q.dtype.type(scale)
        logits -= logits.max(axis=-1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=-1, keepdims=True, dtype=np.float64).astype(q.dtype)
        out[:, :, start:stop] = logits @ vh
    return out.transpose(0, 2, 1, 3).reshape(g, n, d)


def self_attention(x: Node, p: AttentionParams) -> AttentionOutput:
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated."""
    return _attend(x, p, None)


def saliency_scores(keys: Node, U_s: Node) -> Node:
    """tanh(K U_s): one score in (-1, 1) per token.

    tanh rounds to exactly +-1 for large inputs; scores are pulled back to the
    nearest representable value inside the open interval.
    """
    s = ad.tanh_elem(keys @ U_s)
    bound = np.nextafter(s.value.dtype.type(1), s.value.dtype.type(0))
    np.clip(s.value, -bound, bound, out=s.value)
    return s


def saliency_guided_attention(x_aux: Node, p: AttentionParams, s: Node) -> Node:
    """Attention whose logit towards token j is raised by s_j before scaling."""
    return _attend(x_aux, p, s).out


def attention_weights(x: np.ndarray, p: AttentionParams, s: np.ndarray | None = None) -> np.ndarray:
    """Per-head attention matrices (heads, N, N) for a single 2-D input; for inspection."""
    q, k = x @ p.U_q.value, x @ p.U_k.value
    n = x.shape[0]
    h, dh = p.heads, p.head_dim
    qh = q.reshape(n, h, dh).transpose(1, 0, 2)
    kh = k.reshape(n, h, dh).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1)
    if s is not None:
        logits = logits + np.asarray(s).reshape(1, 1, n)
    logits = logits / np.sqrt(dh)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
