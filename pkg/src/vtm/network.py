"""Three-block chunked VTM network with an optional training-only auxiliary path.

Internally a minibatch is one flat token list (all samples, all chunks) whose
features are a single graph node. Tokens stay sorted by sample, then frame,
so every temporal chunk is a contiguous run of rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, init_attention, saliency_guided_attention, saliency_scores, self_attention
from .autodiff import Node, ShapeError
from .merging import MergePlan, merge_step_plan, pooling_weights
from .partition import select_targets
from .tokens import MergeConfig, TokenError, TokenTensor

MODES = ("train", "eval")


@dataclass(frozen=True)
class NetworkConfig:
    chunk_lengths: tuple[int, int, int] = (6, 30, 60)
    merge: MergeConfig = field(default_factory=MergeConfig)
    channels: int = 64
    heads: int = 4
    head_type: str = "classify"
    n_classes: int = 4
    aux_loss_weight: float = 1.0
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "chunk_lengths", tuple(int(c) for c in self.chunk_lengths))
        if isinstance(self.merge, dict):
            object.__setattr__(self, "merge", MergeConfig(**self.merge))
        lens = self.chunk_lengths
        if len(lens) != 3 or min(lens) < 1 or not (lens[0] <= lens[1] <= lens[2]):
            raise TokenError(f"chunk lengths must satisfy 1 <= L1 <= L2 <= L3, got {lens}")
        if self.channels % 8:
            raise TokenError(f"channels must be divisible by 8 for three halvings, got {self.channels}")
        for c in self.block_channels():
            if c % self.heads:
                raise TokenError(f"{self.heads} heads do not divide block width {c}")
        if self.head_type not in ("classify", "regress"):
            raise TokenError(f"unknown head type {self.head_type!r}")
        if self.aux_loss_weight < 0:
            raise TokenError("aux_loss_weight must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise TokenError("dropout must lie in [0, 1)")

    def block_channels(self) -> list[int]:
        return [self.channels >> i for i in range(3)]

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.head_type == "classify" else 1

    @property
    def uses_aux(self) -> bool:
        return self.merge.strategy == "learnable"

    def padded_length(self, L: int) -> int:
        step = math.lcm(*self.chunk_lengths)
        return max(step, -(-L // step) * step)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chunk_lengths"] = list(self.chunk_lengths)
        return d


@dataclass
class VtmBlockParams:
    attn: AttentionParams
    ln1_gain: Node
    ln1_bias: Node
    ln2_gain: Node
    ln2_bias: Node
    proj: Node
    proj_bias: Node

    def nodes(self) -> dict[str, Node]:
        out = dict(self.attn.nodes())
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "proj", "proj_bias"):
            out[name] = getattr(self, name)
        return out


@dataclass
class NetworkParams:
    blocks: list[VtmBlockParams]
    head: Node
    head_bias: Node

    def named(self) -> dict[str, Node]:
        out = {}
        for i, b in enumerate(self.blocks):
            for k, v in b.nodes().items():
                out[f"block{i}.{k}"] = v
        out["head"] = self.head
        out["head_bias"] = self.head_bias
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, node in named.items():
            arr = np.asarray(state[k], dtype=node.value.dtype)
            if arr.shape != node.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape}, model expects {node.shape}")
            node.value = arr.copy()


def init_block(c: int, heads: int, rng: np.random.Generator) -> VtmBlockParams:
    half = c // 2
    return VtmBlockParams(
        attn=init_attention(c, c, heads, rng),
        ln1_gain=ad.parameter(np.ones(c), "ln1_gain"),
        ln1_bias=ad.parameter(np.zeros(c), "ln1_bias"),
        ln2_gain=ad.parameter(np.ones(c), "ln2_gain"),
        ln2_bias=ad.parameter(np.zeros(c), "ln2_bias"),
        proj=ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(c), (c, half)), "proj"),
        proj_bias=ad.parameter(np.zeros(half), "proj_bias"),
    )


def init_params(cfg: NetworkConfig, seed=0, zero_head: bool = False) -> NetworkParams:
    rng = np.random.default_rng(seed)
    blocks = [init_block(c, cfg.heads, rng) for c in cfg.block_channels()]
    c_out = cfg.channels // 8
    head = np.zeros((c_out, cfg.out_dim)) if zero_head else rng.normal(0.0, 1.0 / np.sqrt(c_out), (c_out, cfg.out_dim))
    return NetworkParams(blocks, ad.parameter(head, "head"), ad.parameter(np.zeros(cfg.out_dim), "head_bias"))


# ---------------------------------------------------------------------------
# flat token stream
# ---------------------------------------------------------------------------


@dataclass
class TokenStream:
    """All tokens of a minibatch, flattened, with per-token metadata."""

    features: Node
    sample: np.ndarray
    coords: np.ndarray
    sizes: np.ndarray
    motion: np.ndarray
    grid: tuple[int, int, int, int]
    n_samples: int
    # current token index of every original patch; drives the auxiliary path
    owner: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sample)

    @classmethod
    def from_arrays(cls, features: np.ndarray, motion: np.ndarray | None = None) -> "TokenStream":
        """``features`` is (B, L, H, W, C); ``motion`` is (B, L, H, W) or None."""
        B, L, H, W, C = features.shape
        per = L * H * W
        l, h, w = np.meshgrid(np.arange(L), np.arange(H), np.arange(W), indexing="ij")
        coords = np.tile(np.stack([l.ravel(), h.ravel(), w.ravel()], axis=1), (B, 1))
        mot = np.zeros(B * per) if motion is None else np.asarray(motion, dtype=np.float64).reshape(-1)
        return cls(
            features=ad.constant(np.ascontiguousarray(features.reshape(B * per, C), dtype=ad.default_dtype())),
            sample=np.repeat(np.arange(B), per),
            coords=coords,
            sizes=np.ones(B * per, dtype=np.int64),
            motion=mot,
            grid=(L, H, W, C),
            n_samples=B,
            owner=np.arange(B * per),
        )

    @classmethod
    def from_tokens(cls, t: TokenTensor) -> "TokenStream":
        return cls(
            features=ad.constant(np.asarray(t.features, dtype=ad.default_dtype())),
            sample=np.zeros(t.n, dtype=np.int64),
            coords=np.asarray(t.coords),
            sizes=np.asarray(t.sizes, dtype=np.int64),
            motion=np.asarray(t.motion, dtype=np.float64),
            grid=tuple(t.grid),
            n_samples=1,
            owner=np.arange(t.n),
        )

    def to_tokens(self) -> TokenTensor:
        L, H, W, _ = self.grid
        return TokenTensor(
            features=self.features.value.copy(),
            coords=self.coords.copy(),
            sizes=self.sizes.copy(),
            grid=(L, H, W, self.features.shape[1]),
            motion=self.motion.copy(),
        )


def chunk_bounds(stream_sample: np.ndarray, frames: np.ndarray, chunk_len: int) -> np.ndarray:
    """Start offsets of contiguous (sample, frame // chunk_len) runs, plus the end."""
    key = stream_sample * (1 << 32) + frames // chunk_len
    if np.any(np.diff(key) < 0):
        raise TokenError("token stream is not sorted by sample and frame")
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    return np.r_[starts, len(key)]


def _batched(x: Node, bounds: np.ndarray):
    """Yield (rows, node of shape (G, n, C)) for each group of equal-length chunks."""
    sizes = np.diff(bounds)
    if np.all(sizes == sizes[0]):
        g, n = len(sizes), int(sizes[0])
        yield np.arange(bounds[-1]), ad.reshape(x, (g, n, x.shape[1]))
        return
    for n in np.unique(sizes):
        chunks = np.flatnonzero(sizes == n)
        rows = (bounds[chunks][:, None] + np.arange(n)[None, :]).ravel()
        yield rows, ad.reshape(ad.gather_rows(x, rows), (len(chunks), int(n), x.shape[1]))


def _unbatch(parts: list[tuple[np.ndarray, Node]], total: int) -> Node:
    if len(parts) == 1 and np.array_equal(parts[0][0], np.arange(total)):
        rows, node = parts[0]
        return ad.reshape(node, (total, node.shape[-1]))
    order = np.concatenate([rows for rows, _ in parts])
    flat = [ad.reshape(node, (len(rows), node.shape[-1])) for rows, node in parts]
    stacked = flat[0]
    for f in flat[1:]:
        stacked = _concat_rows(stacked, f)
    inverse = np.empty(total, dtype=np.int64)
    inverse[order] = np.arange(total)
    return ad.gather_rows(stacked, inverse)


def _concat_rows(a: Node, b: Node) -> Node:
    na = a.shape[0]
    out = np.concatenate([a.value, b.value], axis=0)
    return ad._make(out, (a, b), lambda g: (g[:na], g[na:]))


def _layer_norm(x: Node, gain: Node, bias: Node) -> Node:
    return ad.layer_norm_rows(x) * gain + bias


@dataclass
class BlockTrace:
    chunk_len: int
    chunk_sizes_in: list[int]
    chunk_sizes_out: list[int]
    channels_in: int
    channels_out: int
    saliency: np.ndarray | None = None
    chunk_members: list[np.ndarray] | None = None
    targets: list[np.ndarray] | None = None


def _block(
    stream: TokenStream,
    aux: Node | None,
    p: VtmBlockParams,
    merge_cfg: MergeConfig,
    chunk_len: int,
    training: bool,
    dropout: float,
    rng: np.random.Generator,
) -> tuple[TokenStream, Node | None, BlockTrace]:
    c_in = stream.features.shape[1]
    if p.attn.U_q.shape[0] != c_in:
        raise ShapeError(f"block expects {p.attn.U_q.shape[0]} channels, stream has {c_in}")
    bounds = chunk_bounds(stream.sample, stream.coords[:, 0], chunk_len)
    learnable = merge_cfg.strategy == "learnable"

    # main path: attention per chunk, then the channel-halving linear and dropout
    outs, keys_by_rows, sal_parts = [], [], []
    for rows, xb in _batched(stream.features, bounds):
        h = _layer_norm(xb, p.ln1_gain, p.ln1_bias)
        att = self_attention(h, p.attn)
        x2 = xb + att.out
        y = _layer_norm(x2, p.ln2_gain, p.ln2_bias) @ p.proj + p.proj_bias
        y = ad.dropout(y, dropout, rng, training)
        outs.append((rows, y))
        keys_by_rows.append((rows, att.keys.reshape(len(rows), -1)))
        if learnable:
            sal_parts.append((rows, saliency_scores(att.K, p.attn.U_s)))
    y_flat = _unbatch(outs, stream.n)
    keys = np.empty((stream.n, keys_by_rows[0][1].shape[1]))
    for rows, k in keys_by_rows:
        keys[rows] = k
    s_flat = _unbatch(sal_parts, stream.n) if learnable else None
    saliency = None if s_flat is None else s_flat.value[:, 0].astype(np.float64)

    # merge each chunk independently
    L, H, W, _ = stream.grid
    segment = np.empty(stream.n, dtype=np.int64)
    reps, sizes_out, targets_log = [], [], []
    offset = 0
    for a, b in zip(bounds[:-1], bounds[1:]):
        view = TokenTensor(
            features=keys[a:b],
            coords=stream.coords[a:b],
            sizes=stream.sizes[a:b],
            grid=(L, H, W, keys.shape[1]),
            motion=stream.motion[a:b],
        )
        if b - a < merge_cfg.gamma:
            # too few tokens for a single target: pass the chunk through
            targets = np.zeros(0, dtype=np.int64)
            plan = MergePlan(np.arange(b - a), np.arange(b - a))
        else:
            targets = select_targets(
                merge_cfg.strategy, view, merge_cfg.gamma, rng,
                None if saliency is None else saliency[a:b],
            )
            plan = merge_step_plan(keys[a:b], merge_cfg, targets, b - a, strict=False)
        segment[a:b] = plan.segment + offset
        reps.append(plan.representative + a)
        sizes_out.append(plan.n_out)
        targets_log.append(targets + a)
        offset += plan.n_out
    reps = np.concatenate(reps)
    weights = pooling_weights(stream.sizes, stream.motion, merge_cfg.pooling)
    merged = ad.segment_mean(y_flat, segment, weights, offset)
    sizes = np.bincount(segment, weights=stream.sizes, minlength=offset).astype(np.int64)
    motion = np.bincount(segment, weights=stream.sizes * stream.motion, minlength=offset) / sizes
    out = TokenStream(
        features=merged,
        sample=stream.sample[reps],
        coords=stream.coords[reps],
        sizes=sizes,
        motion=motion,
        grid=stream.grid,
        n_samples=stream.n_samples,
        owner=segment[stream.owner],
    )

    # auxiliary path: full token set, attention biased by the owning token's saliency
    aux_out = None
    if aux is not None:
        if s_flat is None:
            raise TokenError("auxiliary path needs the learnable strategy")
        n0 = aux.shape[0]
        L0 = stream.grid[0]
        per = n0 // stream.n_samples
        frames0 = np.tile(np.arange(per) // (per // L0), stream.n_samples)
        bounds0 = chunk_bounds(np.repeat(np.arange(stream.n_samples), per), frames0, chunk_len)
        s_aux = ad.gather_rows(s_flat, stream.owner)
        aux_parts = []
        for (rows, xb), (_, sb) in zip(_batched(aux, bounds0), _batched(s_aux, bounds0)):
            h = _layer_norm(xb, p.ln1_gain, p.ln1_bias)
            x2 = xb + saliency_guided_attention(h, p.attn, sb)
            y = _layer_norm(x2, p.ln2_gain, p.ln2_bias) @ p.proj + p.proj_bias
            aux_parts.append((rows, ad.dropout(y, dropout, rng, training)))
        aux_out = _unbatch(aux_parts, n0)

    trace = BlockTrace(
        chunk_len=chunk_len,
        chunk_sizes_in=np.diff(bounds).tolist(),
        chunk_sizes_out=sizes_out,
        channels_in=c_in,
        channels_out=merged.shape[1],
        saliency=saliency,
        chunk_members=[np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])],
        targets=targets_log,
    )
    return out, aux_out, trace


def vtm_block_forward(
    t: TokenTensor,
    params: VtmBlockParams,
    cfg: MergeConfig,
    mode: str = "eval",
    aux_in: Node | None = None,
    chunk_len: int | None = None,
    seed=0,
    dropout: float = 0.0,
):
    """Run one VTM block on a single token set.

    Returns ``(t_out, aux_out, saliency)``; ``aux_out`` is None unless training
    with the learnable strategy and ``aux_in`` given.
    """
    if mode not in MODES:
        raise TokenError(f"mode must be one of {MODES}")
    training = mode == "train"
    wants_aux = training and cfg.strategy == "learnable"
    if (aux_in is not None) != wants_aux:
        raise TokenError("aux_in must be given exactly when training the learnable strategy")
    stream = TokenStream.from_tokens(t)
    chunk_len = chunk_len or t.grid[0]
    rng = np.random.default_rng(seed)
    if training:
        out, aux_out, trace = _block(stream, aux_in, params, cfg, chunk_len, True, dropout, rng)
    else:
        with ad.no_grad():
            out, aux_out, trace = _block(stream, None, params, cfg, chunk_len, False, 0.0, rng)
    return out.to_tokens(), aux_out, trace.saliency


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    prediction: Node
    aux_prediction: Node | None
    traces: list[BlockTrace]
    final: TokenStream


def pad_frames(features: np.ndarray, motion: np.ndarray | None, L_target: int):
    """Repeat the last frame until the clip has ``L_target`` frames (axis 1)."""
    L = features.shape[1]
    if L == L_target:
        return features, motion
    reps = np.r_[np.arange(L), np.full(L_target - L, L - 1)]
    return features[:, reps], None if motion is None else motion[:, reps]


def _head(stream_feats: Node, sample: np.ndarray, n_samples: int, params: NetworkParams) -> Node:
    pooled = ad.segment_mean(stream_feats, sample, None, n_samples)
    return pooled @ params.head + params.head_bias


def forward_batch(
    features: np.ndarray,
    cfg: NetworkConfig,
    params: NetworkParams,
    mode: str = "eval",
    motion: np.ndarray | None = None,
    seed=0,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Forward a (B, L, H, W, C) batch. Train mode builds a graph; eval mode does not."""
    if mode not in MODES:
        raise TokenError(f"mode must be one of {MODES}")
    training = mode == "train"
    if features.shape[-1] != cfg.channels:
        raise ShapeError(f"input has {features.shape[-1]} channels, config says {cfg.channels}")
    L = features.shape[1]
    features, motion = pad_frames(features, motion, cfg.padded_length(L))
    rng = rng if rng is not None else np.random.default_rng(seed)
    stream = TokenStream.from_arrays(features, motion)
    aux = stream.features if (training and cfg.uses_aux) else None
    expected = cfg.block_channels()
    traces = []
    for i, (p, chunk_len) in enumerate(zip(params.blocks, cfg.chunk_lengths)):
        if stream.features.shape[1] != expected[i]:
            raise ShapeError(f"block {i} input has {stream.features.shape[1]} channels, expected {expected[i]}")
        stream, aux, trace = _block(stream, aux, p, cfg.merge, chunk_len, training, cfg.dropout if training else 0.0, rng)
        traces.append(trace)
    if stream.features.shape[1] != cfg.channels // 8:
        raise ShapeError("final width is not channels / 8")
    pred = _head(stream.features, stream.sample, stream.n_samples, params)
    aux_pred = None
    if aux is not None:
        per = aux.shape[0] // stream.n_samples
        aux_pred = _head(aux, np.repeat(np.arange(stream.n_samples), per), stream.n_samples, params)
    return ForwardResult(pred, aux_pred, traces, stream)


def network_forward(
    video: TokenTensor | np.ndarray,
    cfg: NetworkConfig,
    params: NetworkParams,
    mode: str = "eval",
    seed=0,
) -> np.ndarray:
    """Prediction for one clip: logits (classify) or a scalar (regress)."""
    if isinstance(video, TokenTensor):
        L, H, W, C = video.grid
        if video.n != L * H * W:
            raise TokenError("network input must be an unmerged token grid")
        feats = video.features.reshape(1, L, H, W, C)
        motion = video.motion.reshape(1, L, H, W)
    else:
        feats = np.asarray(video)[None]
        motion = None
    if mode == "eval":
        with ad.no_grad():
            res = forward_batch(feats, cfg, params, "eval", motion, seed)
    else:
        res = forward_batch(feats, cfg, params, "train", motion, seed)
    out = res.prediction.value[0]
    return out if cfg.head_type == "classify" else out[0]


def token_schedule(traces: Sequence[BlockTrace]) -> list[tuple[list[int], list[int]]]:
    return [(t.chunk_sizes_in, t.chunk_sizes_out) for t in traces]
