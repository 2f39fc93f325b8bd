"""Partition, match and merge: the strategy-agnostic token merging pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DomainError, pooling_matrix
from .tokens import MatchResult, MergeConfig, PartitionResult, TokenError, TokenTensor

MOTION_EPS = 1e-6


def partition_uniform(t: TokenTensor | int, gamma: int) -> PartitionResult:
    """Every gamma-th token is a target; the trailing partial group has none."""
    n = t if isinstance(t, (int, np.integer)) else t.n
    if gamma < 2:
        raise TokenError(f"gamma must be >= 2, got {gamma}")
    if n < gamma:
        raise TokenError(f"too few tokens: {n} < gamma={gamma}")
    targets = np.arange(0, (n // gamma) * gamma, gamma, dtype=np.int64)
    return PartitionResult.from_targets(n, targets)


def _unit_rows(keys: np.ndarray, strict: bool = True) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    norms = np.linalg.norm(keys, axis=-1, keepdims=True)
    zero = np.flatnonzero(norms[..., 0] == 0)
    if zero.size:
        if strict:
            raise DomainError(f"zero-norm key row {int(zero[0])}")
        # a zero key is equally (dis)similar to everything
        norms[zero] = 1.0
    return keys / norms


def match_sources(keys: np.ndarray, part: PartitionResult, strict: bool = True) -> MatchResult:
    """Match every source to its most cosine-similar target (lowest index on ties).

    With ``strict=False`` zero keys get similarity 0 instead of raising.
    """
    if len(part.target_idx) == 0:
        raise TokenError("no target tokens to match against")
    unit = _unit_rows(keys, strict)
    sims = unit[part.source_idx] @ unit[part.target_idx].T
    if sims.shape[0] == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), np.zeros(0))
    best = np.argmax(sims, axis=1)
    return MatchResult(part.target_idx[best], sims[np.arange(len(best)), best])


def limit_matches(m: MatchResult, r: int) -> MatchResult:
    """Keep the r highest-scoring matches; the rest get the sentinel -1."""
    n_src = len(m.match_of)
    if not 0 <= r <= n_src:
        raise TokenError(f"r={r} out of range [0, {n_src}]")
    order = np.argsort(-m.score_of, kind="stable")
    match = m.match_of.copy()
    match[order[r:]] = -1
    return MatchResult(match, m.score_of.copy())


@dataclass(frozen=True)
class MergePlan:
    """How input tokens map onto output tokens.

    ``segment[i]`` is the output slot of input token i; ``representative[k]``
    is the input token whose coords output k inherits.
    """

    segment: np.ndarray
    representative: np.ndarray

    @property
    def n_out(self) -> int:
        return len(self.representative)

    def constituents(self) -> list[list[int]]:
        groups = [[] for _ in range(self.n_out)]
        for i, s in enumerate(self.segment):
            groups[s].append(i)
        return groups


def plan_merge(part: PartitionResult, m: MatchResult) -> MergePlan:
    n = part.n
    if len(m.match_of) != len(part.source_idx):
        raise TokenError(f"{len(m.match_of)} matches for {len(part.source_idx)} sources")
    merged = m.match_of >= 0
    is_target = np.zeros(n, dtype=bool)
    is_target[part.target_idx] = True
    if np.any(~is_target[m.match_of[merged]]):
        raise TokenError("match points at a token that is not a target")
    keep = is_target.copy()
    keep[part.source_idx[~merged]] = True
    reps = np.flatnonzero(keep)
    slot = np.full(n, -1, dtype=np.int64)
    slot[reps] = np.arange(len(reps))
    segment = slot.copy()
    segment[part.source_idx[merged]] = slot[m.match_of[merged]]
    return MergePlan(segment, reps)


def pooling_weights(sizes: np.ndarray, motion: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "average":
        return np.ones(len(sizes))
    if pooling == "size_weighted":
        return np.asarray(sizes, dtype=np.float64)
    if pooling == "motion_weighted":
        return np.asarray(motion, dtype=np.float64) + MOTION_EPS
    raise TokenError(f"unknown pooling {pooling!r}")


def apply_plan(t: TokenTensor, plan: MergePlan, pooling: str) -> TokenTensor:
    w = pooling_weights(t.sizes, t.motion, pooling)
    P = pooling_matrix(plan.segment, w, plan.n_out)
    feats = np.asarray(P @ t.features.astype(np.float64)).astype(t.features.dtype)
    sizes = np.bincount(plan.segment, weights=t.sizes, minlength=plan.n_out).astype(np.int64)
    motion = np.bincount(plan.segment, weights=t.sizes * t.motion, minlength=plan.n_out) / sizes
    return TokenTensor(
        features=feats,
        coords=t.coords[plan.representative],
        sizes=sizes,
        grid=t.grid,
        motion=motion,
    )


def merge(t: TokenTensor, part: PartitionResult, m: MatchResult, pooling: str = "average") -> TokenTensor:
    if part.n != t.n:
        raise TokenError(f"partition covers {part.n} tokens, tensor has {t.n}")
    return apply_plan(t, plan_merge(part, m), pooling)


def merge_step_plan(keys: np.ndarray, cfg: MergeConfig, targets, n: int, strict: bool = True) -> MergePlan:
    targets = np.asarray(targets)
    if targets.size == 0:
        raise TokenError("targets must be nonempty")
    part = PartitionResult.from_targets(n, targets)
    m = match_sources(keys, part, strict)
    m = limit_matches(m, cfg.merged_count(len(part.source_idx)))
    return plan_merge(part, m)


def merge_step(t: TokenTensor, keys: np.ndarray, cfg: MergeConfig, targets) -> TokenTensor:
    """Match on ``keys``, keep the top R = floor(r_fraction * |S|) matches, merge."""
    return apply_plan(t, merge_step_plan(keys, cfg, targets, t.n), cfg.pooling)
