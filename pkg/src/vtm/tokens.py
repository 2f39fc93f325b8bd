"""Token sets and the small records passed between merging stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

POOLING_MODES = ("average", "size_weighted", "motion_weighted")
STRATEGIES = ("naive", "center", "boundary", "motion", "learnable")


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class TokenTensor:
    """N tokens with C channels laid out over an (L, H, W) grid.

    Tokens are flattened frame-major. ``sizes`` counts the original patches a
    token stands for; ``motion`` defaults to zeros.
    """

    features: np.ndarray
    coords: np.ndarray
    sizes: np.ndarray
    grid: tuple[int, int, int, int]
    motion: np.ndarray = None

    def __post_init__(self):
        if self.motion is None:
            object.__setattr__(self, "motion", np.zeros(len(self.sizes), dtype=np.float64))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @classmethod
    def from_grid(cls, features: np.ndarray, motion: np.ndarray | None = None) -> "TokenTensor":
        """Build a fresh token set from an (L, H, W, C) feature array."""
        L, H, W, C = features.shape
        l, h, w = np.meshgrid(np.arange(L), np.arange(H), np.arange(W), indexing="ij")
        coords = np.stack([l.ravel(), h.ravel(), w.ravel()], axis=1)
        mot = None if motion is None else np.asarray(motion, dtype=np.float64).reshape(-1)
        return cls(
            features=np.ascontiguousarray(features.reshape(L * H * W, C)),
            coords=coords,
            sizes=np.ones(L * H * W, dtype=np.int64),
            grid=(L, H, W, C),
            motion=mot,
        )

    def with_features(self, features: np.ndarray) -> "TokenTensor":
        return replace(self, features=features)

    def subset(self, idx) -> "TokenTensor":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            coords=self.coords[idx],
            sizes=self.sizes[idx],
            motion=self.motion[idx],
        )


def validate(t: TokenTensor) -> None:
    """Raise :class:`TokenError` naming the first violated invariant."""
    if len(t.grid) != 4 or any(int(g) < 1 for g in t.grid):
        raise TokenError(f"grid must be four positive ints, got {t.grid}")
    L, H, W, C = t.grid
    feats = np.asarray(t.features)
    if feats.ndim != 2:
        raise TokenError(f"features must be N x C, got shape {feats.shape}")
    n = feats.shape[0]
    if feats.shape[1] != C:
        raise TokenError(f"channel mismatch: features have {feats.shape[1]}, grid says {C}")
    if not np.all(np.isfinite(feats)):
        raise TokenError("features contain non-finite values")
    coords = np.asarray(t.coords)
    if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] != n:
        raise TokenError(f"coordinate count mismatch: {coords.shape} for {n} tokens")
    sizes = np.asarray(t.sizes)
    if sizes.shape != (n,):
        raise TokenError(f"size count mismatch: {sizes.shape[0] if sizes.ndim else 0} sizes for {n} tokens")
    if sizes.dtype.kind not in "iu" or np.any(sizes < 1):
        raise TokenError("sizes must be positive integers")
    if np.any(coords < 0) or np.any(coords >= np.array([L, H, W])):
        raise TokenError("coordinate out of grid")
    motion = np.asarray(t.motion)
    if motion.shape != (n,):
        raise TokenError(f"motion count mismatch: {motion.shape} for {n} tokens")
    if np.any(motion < 0) or not np.all(np.isfinite(motion)):
        raise TokenError("motion magnitudes must be finite and non-negative")


@dataclass(frozen=True)
class PartitionResult:
    target_idx: np.ndarray
    source_idx: np.ndarray

    @classmethod
    def from_targets(cls, n: int, targets) -> "PartitionResult":
        targets = np.unique(np.asarray(targets, dtype=np.int64))
        if targets.size == 0:
            raise TokenError("need at least one target token")
        if targets[0] < 0 or targets[-1] >= n:
            raise TokenError(f"target index out of range for {n} tokens")
        mask = np.ones(n, dtype=bool)
        mask[targets] = False
        return cls(targets, np.flatnonzero(mask))

    @property
    def n(self) -> int:
        return len(self.target_idx) + len(self.source_idx)


@dataclass(frozen=True)
class MatchResult:
    """Per-source matched target (or -1) and its cosine similarity."""

    match_of: np.ndarray
    score_of: np.ndarray

    @property
    def n_merged(self) -> int:
        return int(np.count_nonzero(self.match_of >= 0))


@dataclass(frozen=True)
class MergeConfig:
    gamma: int = 6
    r_fraction: float = 0.8
    pooling: str = "average"
    strategy: str = "learnable"

    def __post_init__(self):
        if int(self.gamma) != self.gamma or self.gamma < 2:
            raise TokenError(f"gamma must be an integer >= 2, got {self.gamma}")
        if not 0.0 <= self.r_fraction <= 1.0:
            raise TokenError(f"r_fraction must lie in [0, 1], got {self.r_fraction}")
        if self.pooling not in POOLING_MODES:
            raise TokenError(f"unknown pooling {self.pooling!r}")
        if self.strategy not in STRATEGIES:
            raise TokenError(f"unknown strategy {self.strategy!r}")

    def merged_count(self, n_sources: int) -> int:
        return merged_count(n_sources, self.r_fraction)


def expected_output_count(n: int, gamma: int, r_fraction: float) -> int:
    """Token count after one merge step: N - floor(r * (N - floor(N / gamma)))."""
    return n - merged_count(n - n // gamma, r_fraction)


def merged_count(n_sources: int, r_fraction: float) -> int:
    """R = floor(r_fraction * |S|), reading r_fraction as the decimal it prints as."""
    return math.floor(Fraction(str(float(r_fraction))) * n_sources)
