"""Target-token selection rules, one per merging strategy.

All rules return ``floor(N / gamma)`` distinct indices sorted ascending.
"""

from __future__ import annotations

import math

import numpy as np

from .merging import partition_uniform
from .tokens import TokenError, TokenTensor


def target_count(n: int, gamma: int) -> int:
    return n // gamma


def targets_naive(t: TokenTensor, gamma: int) -> np.ndarray:
    return partition_uniform(t, gamma).target_idx


def center_mask(coords: np.ndarray, H: int, W: int) -> np.ndarray:
    """True for tokens inside the centred floor(H/2) x floor(W/2) window."""
    if H < 2 or W < 2:
        raise TokenError(f"grid too small for region rules: H={H}, W={W}")
    h0, w0 = H // 4, W // 4
    h, w = coords[:, 1], coords[:, 2]
    return (h >= h0) & (h < h0 + H // 2) & (w >= w0) & (w < w0 + W // 2)


def region_factors(gamma: int) -> tuple[int, int]:
    """(dense, sparse) partition factors: gamma/2 and ceil(3 gamma / 2)."""
    return max(1, gamma // 2), math.ceil(3 * gamma / 2)


def _mod_rule_in_region(frames: np.ndarray, members: np.ndarray, factor: int) -> np.ndarray:
    # rank each member within its frame, keep ranks divisible by factor
    chosen = []
    for f in np.unique(frames[members]):
        in_frame = members[frames[members] == f]
        chosen.append(in_frame[::factor])
    return np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)


def _fit_quota(candidates: np.ndarray, members: np.ndarray, quota: int) -> np.ndarray:
    candidates = np.sort(candidates)
    if len(candidates) >= quota:
        return candidates[:quota]
    spare = np.setdiff1d(members, candidates, assume_unique=True)
    return np.sort(np.concatenate([candidates, spare[: quota - len(candidates)]]))


def _region_targets(t: TokenTensor, gamma: int, dense_center: bool) -> np.ndarray:
    _, H, W, _ = t.grid
    n = t.n
    if n < gamma:
        raise TokenError(f"too few tokens: {n} < gamma={gamma}")
    inside = center_mask(t.coords, H, W)
    center = np.flatnonzero(inside)
    boundary = np.flatnonzero(~inside)
    dense, sparse = region_factors(gamma)
    frames = t.coords[:, 0]
    f_center, f_boundary = (dense, sparse) if dense_center else (sparse, dense)

    total = target_count(n, gamma)
    favoured, other = (center, boundary) if dense_center else (boundary, center)
    quota_fav = min((total + 1) // 2, len(favoured))
    quota_other = total - quota_fav
    if quota_other > len(other):
        quota_other = len(other)
        quota_fav = total - quota_other
    cand_center = _mod_rule_in_region(frames, center, f_center)
    cand_boundary = _mod_rule_in_region(frames, boundary, f_boundary)
    cand_fav, cand_other = (cand_center, cand_boundary) if dense_center else (cand_boundary, cand_center)
    chosen = np.concatenate([
        _fit_quota(cand_fav, favoured, quota_fav),
        _fit_quota(cand_other, other, quota_other),
    ])
    return np.sort(chosen)


def targets_center(t: TokenTensor, gamma: int) -> np.ndarray:
    """Half the targets (rounded up) come from the central window, spaced gamma/2 apart."""
    return _region_targets(t, gamma, dense_center=True)


def targets_boundary(t: TokenTensor, gamma: int) -> np.ndarray:
    """Mirror of :func:`targets_center`: the dense spacing is used on the border."""
    return _region_targets(t, gamma, dense_center=False)


def sample_targets_weighted(weights, count: int, rng_seed) -> np.ndarray:
    """Draw ``count`` distinct indices with successive softmax(weights) probabilities.

    Gumbel-top-k: perturb the logits with Gumbel(0, 1) noise and keep the
    ``count`` largest.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if count > n:
        raise TokenError(f"cannot sample {count} targets from {n} tokens")
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keys = w + rng.gumbel(size=n)
    top = np.argpartition(-keys, count - 1)[:count]
    return np.sort(top).astype(np.int64)


def targets_motion(t: TokenTensor, gamma: int, rng_seed) -> np.ndarray:
    return sample_targets_weighted(t.motion, target_count(t.n, gamma), rng_seed)


def targets_saliency(saliency, gamma: int, rng_seed) -> np.ndarray:
    s = np.asarray(saliency, dtype=np.float64).reshape(-1)
    return sample_targets_weighted(s, target_count(len(s), gamma), rng_seed)


def select_targets(
    strategy: str,
    t: TokenTensor,
    gamma: int,
    rng=None,
    saliency=None,
) -> np.ndarray:
    if strategy == "naive":
        return targets_naive(t, gamma)
    if strategy == "center":
        return targets_center(t, gamma)
    if strategy == "boundary":
        return targets_boundary(t, gamma)
    if strategy == "motion":
        return targets_motion(t, gamma, rng)
    if strategy == "learnable":
        if saliency is None:
            raise TokenError("learnable strategy needs saliency scores")
        return targets_saliency(saliency, gamma, rng)
    raise TokenError(f"unknown strategy {strategy!r}")
