"""Per-token motion magnitudes: file format, synthetic fields, attachment."""

from __future__ import annotations

import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from .tensorfile import FormatError
from .tokens import TokenError, TokenTensor

MAGIC = b"VTMM1\x00"
KINDS = ("static", "moving_box", "camera_pan")


def save_motion(path, grid: np.ndarray) -> None:
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 3:
        raise FormatError(f"motion grid must be L x H x W, got {grid.shape}")
    if np.any(grid < 0):
        raise FormatError("negative motion magnitude")
    Path(path).write_bytes(MAGIC + struct.pack("<3I", *grid.shape) + grid.tobytes())


def load_motion(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(raw) < len(MAGIC) + 12:
        raise FormatError(f"{path}: truncated header")
    L, H, W = struct.unpack_from("<3I", raw, len(MAGIC))
    body = raw[len(MAGIC) + 12:]
    if len(body) != 4 * L * H * W:
        raise FormatError(f"{path}: dim mismatch, {len(body)} bytes for {L}x{H}x{W}")
    grid = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(L, H, W)
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise FormatError(f"{path}: negative or non-finite values")
    return grid


def box_shape(area: int) -> tuple[int, int]:
    """Most square (rows, cols) factorisation of ``area``."""
    rows = int(np.floor(np.sqrt(area)))
    while area % rows:
        rows -= 1
    return rows, area // rows


def box_trajectory(L: int, H: int, W: int, box: tuple[int, int], rng: np.random.Generator,
                   start=None, velocity=None) -> np.ndarray:
    """Top-left corners (L x 2) of a box moving in a straight line, inside the grid."""
    bh, bw = box
    if bh > H or bw > W or bh < 1 or bw < 1:
        raise TokenError(f"box {box} does not fit a {H}x{W} frame")
    if start is None:
        start = (int(rng.integers(0, H - bh + 1)), int(rng.integers(0, W - bw + 1)))
    if velocity is None:
        # largest per-frame step that keeps the whole path inside the frame
        span_h, span_w = H - bh, W - bw
        lo_h, hi_h = -start[0] / max(L - 1, 1), (span_h - start[0]) / max(L - 1, 1)
        lo_w, hi_w = -start[1] / max(L - 1, 1), (span_w - start[1]) / max(L - 1, 1)
        velocity = (rng.uniform(lo_h, hi_h), rng.uniform(lo_w, hi_w))
    t = np.arange(L)[:, None]
    corners = np.floor(np.asarray(start, dtype=np.float64) + t * np.asarray(velocity, dtype=np.float64) + 1e-9)
    corners = corners.astype(np.int64)
    if np.any(corners < 0) or np.any(corners[:, 0] + bh > H) or np.any(corners[:, 1] + bw > W):
        raise TokenError("box out of bounds")
    return corners


def box_mask(L: int, H: int, W: int, box: tuple[int, int], corners: np.ndarray) -> np.ndarray:
    mask = np.zeros((L, H, W), dtype=bool)
    bh, bw = box
    for l, (h0, w0) in enumerate(corners):
        mask[l, h0:h0 + bh, w0:w0 + bw] = True
    return mask


def synth_motion(kind: str, grid, params: dict | None = None, seed=0) -> np.ndarray:
    """Synthetic motion field over an (L, H, W) grid.

    ``moving_box`` puts ``magnitude`` on a translating box and ``background``
    elsewhere; ``camera_pan`` adds a uniform ``global`` magnitude everywhere.
    """
    L, H, W = (int(g) for g in grid[:3])
    params = dict(params or {})
    if kind not in KINDS:
        raise TokenError(f"unknown motion kind {kind!r}")
    if kind == "static":
        return np.zeros((L, H, W), dtype=np.float32)
    rng = np.random.default_rng(seed)
    box = tuple(params.get("box", (max(1, H // 4), max(1, W // 4))))
    corners = box_trajectory(L, H, W, box, rng, params.get("start"), params.get("velocity"))
    inside = box_mask(L, H, W, box, corners)
    magnitude = float(params.get("magnitude", 10.0))
    base = float(params.get("global", 5.0)) if kind == "camera_pan" else float(params.get("background", 0.0))
    out = np.full((L, H, W), base, dtype=np.float32)
    out[inside] = max(magnitude, base)
    return out


def attach_motion(t: TokenTensor, grid: np.ndarray) -> TokenTensor:
    grid = np.asarray(grid)
    if grid.shape != tuple(t.grid[:3]):
        raise TokenError(f"motion grid mismatch: {grid.shape} vs token grid {t.grid[:3]}")
    c = t.coords
    return replace(t, motion=grid[c[:, 0], c[:, 1], c[:, 2]].astype(np.float64))


def motion_grid(t: TokenTensor) -> np.ndarray:
    """Scatter token motion back onto the grid (zeros where no token sits)."""
    L, H, W, _ = t.grid
    out = np.zeros((L, H, W), dtype=np.float32)
    c = t.coords
    out[c[:, 0], c[:, 1], c[:, 2]] = t.motion
    return out
