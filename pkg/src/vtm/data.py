"""Synthetic planted-saliency video classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .motion import box_mask, box_shape, box_trajectory
from .tokens import TokenError


@dataclass
class Split:
    features: np.ndarray  # (S, L, H, W, C) float32
    labels: np.ndarray  # (S,) int
    masks: np.ndarray  # (S, L, H, W) bool, True on signal tokens
    motion: np.ndarray | None  # (S, L, H, W) or None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(
            self.features[idx],
            self.labels[idx],
            self.masks[idx],
            None if self.motion is None else self.motion[idx],
        )


@dataclass
class SyntheticDataset:
    train: Split
    val: Split
    n_classes: int
    prototypes: np.ndarray  # (K, C) class patterns carried by signal tokens


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 4
    samples_per_class: int = 32
    grid: tuple[int, int, int] = (16, 8, 8)
    channels: int = 64
    k_sig: int = 6
    sigma: float = 0.5
    object_scale: float = 1.5
    class_scale: float = 1.5
    motion: str = "none"  # none | aligned | adversarial
    motion_high: float = 5.0
    val_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        L, H, W = self.grid
        if self.k_sig > H * W:
            raise TokenError(f"k_sig={self.k_sig} exceeds the {H * W} tokens of a frame")
        if self.k_sig < 1 or self.n_classes < 2 or self.samples_per_class < 1:
            raise TokenError("need k_sig >= 1, n_classes >= 2, samples_per_class >= 1")
        if self.motion not in ("none", "aligned", "adversarial"):
            raise TokenError(f"unknown motion mode {self.motion!r}")
        if self.sigma < 0:
            raise TokenError("sigma must be >= 0")


def _directions(k: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """k + 1 orthonormal directions in R^c: a shared object axis then one per class."""
    if k + 1 > c:
        raise TokenError(f"need channels > n_classes, got {c} <= {k}")
    q, _ = np.linalg.qr(rng.normal(size=(c, k + 1)))
    return q.T


def generate(cfg: SynthConfig) -> SyntheticDataset:
    """Background tokens are N(0, sigma^2) noise. In every frame ``k_sig`` tokens,
    a box moving along a straight path, carry a shared object component plus
    the class pattern.
    """
    rng = np.random.default_rng(cfg.seed)
    L, H, W = cfg.grid
    C = cfg.channels
    dirs = _directions(cfg.n_classes, C, rng)
    obj, protos = dirs[0], dirs[1:]
    box = box_shape(cfg.k_sig)
    if box[0] > H or box[1] > W:
        box = (1, cfg.k_sig) if cfg.k_sig <= W else box
    total = cfg.n_classes * cfg.samples_per_class
    labels = np.repeat(np.arange(cfg.n_classes), cfg.samples_per_class)
    feats = (cfg.sigma * rng.standard_normal((total, L, H, W, C))).astype(np.float32)
    masks = np.zeros((total, L, H, W), dtype=bool)
    for i in range(total):
        corners = box_trajectory(L, H, W, box, rng)
        m = box_mask(L, H, W, box, corners)
        masks[i] = m
        feats[i][m] += (cfg.object_scale * obj + cfg.class_scale * protos[labels[i]]).astype(np.float32)
    motion = None
    if cfg.motion == "aligned":
        motion = np.where(masks, cfg.motion_high, 0.0).astype(np.float32)
    elif cfg.motion == "adversarial":
        motion = np.where(masks, 0.0, cfg.motion_high).astype(np.float32)

    # stratified split
    val_idx, train_idx = [], []
    n_val = int(round(cfg.val_fraction * cfg.samples_per_class))
    for k in range(cfg.n_classes):
        members = rng.permutation(np.flatnonzero(labels == k))
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    full = Split(feats, labels, masks, motion)
    return SyntheticDataset(
        train=full.subset(np.sort(train_idx)),
        val=full.subset(np.sort(val_idx)),
        n_classes=cfg.n_classes,
        prototypes=protos,
    )
