"""Analytic attention cost under a token-merging schedule, plus wall-clock timing.

FLOPs count a multiply-add as two operations and charge five operations per
softmax entry per head. Memory is counted in activation floats.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .network import NetworkConfig, NetworkParams, forward_batch
from .tokens import expected_output_count

SOFTMAX_OPS = 5
CSV_COLUMNS = ("block", "chunk_len", "n_in", "n_out", "flops", "peak_floats")


def attention_flops(n: int, c_in: int, d: int, heads: int, include_projections: bool = True) -> int:
    n, c_in, d, heads = int(n), int(c_in), int(d), int(heads)
    proj = 2 * n * c_in * d * 3 if include_projections else 0
    logits = 2 * n * n * d
    softmax = SOFTMAX_OPS * n * n * heads
    weighted = 2 * n * n * d
    return proj + logits + softmax + weighted


def attention_floats(n: int, c_in: int, d: int, heads: int) -> int:
    """Activations alive during one attention call: input, Q/K/V, weights, output."""
    return n * c_in + 3 * n * d + heads * n * n + n * d


@dataclass(frozen=True)
class BlockCost:
    block: int
    chunk_len: int
    chunks: int
    n_in: int  # tokens entering the block, all chunks
    n_out: int
    flops: int
    peak_floats: int


@dataclass
class CostReport:
    blocks: list[BlockCost] = field(default_factory=list)
    seconds: float | None = None

    @property
    def flops(self) -> int:
        return sum(b.flops for b in self.blocks)

    @property
    def peak_floats(self) -> int:
        return max(b.peak_floats for b in self.blocks)

    def token_counts(self) -> list[tuple[int, int]]:
        return [(b.n_in, b.n_out) for b in self.blocks]

    def rows(self) -> list[dict]:
        return [{k: getattr(b, k) for k in CSV_COLUMNS} for b in self.blocks]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            w.writerows(self.rows())


def schedule_cost(cfg: NetworkConfig, l_total: int, height: int, width: int) -> CostReport:
    """Trace the count law through every block and chunk.

    Chunk lengths must nest (each divides the next) so that every chunk of a
    block receives the same number of tokens.
    """
    lens = cfg.chunk_lengths
    for a, b in zip(lens, lens[1:]):
        if b % a:
            raise ValueError(f"chunk lengths {lens} do not nest; token counts would be data dependent")
    L = cfg.padded_length(l_total)
    per_chunk = lens[0] * height * width
    prev_len = lens[0]
    report = CostReport()
    m = cfg.merge
    for i, (chunk_len, c_in) in enumerate(zip(lens, cfg.block_channels())):
        if i:
            per_chunk *= chunk_len // prev_len
        chunks = L // chunk_len
        n_out = per_chunk if per_chunk < m.gamma else expected_output_count(per_chunk, m.gamma, m.r_fraction)
        report.blocks.append(BlockCost(
            block=i,
            chunk_len=chunk_len,
            chunks=chunks,
            n_in=chunks * per_chunk,
            n_out=chunks * n_out,
            flops=chunks * attention_flops(per_chunk, c_in, c_in, cfg.heads),
            peak_floats=chunks * attention_floats(per_chunk, c_in, c_in, cfg.heads),
        ))
        per_chunk, prev_len = n_out, chunk_len
    return report


def baseline_config(cfg: NetworkConfig) -> NetworkConfig:
    return replace(cfg, merge=replace(cfg.merge, r_fraction=0.0))


def flop_reduction(cfg: NetworkConfig, l_total: int, height: int, width: int) -> float:
    merged = schedule_cost(cfg, l_total, height, width).flops
    base = schedule_cost(baseline_config(cfg), l_total, height, width).flops
    return base / merged


def measure_throughput(cfg: NetworkConfig, params: NetworkParams, n_trials: int = 5, seed=0,
                       grid: tuple[int, int, int] = (60, 16, 16), warmup: int = 3) -> tuple[float, float]:
    """Eval-mode samples/sec (mean, std) on one fixed synthetic clip."""
    rng = np.random.default_rng(seed)
    L, H, W = grid
    x = rng.standard_normal((1, L, H, W, cfg.channels)).astype(np.float32)
    motion = rng.uniform(0.0, 1.0, (1, L, H, W)).astype(np.float32)
    rates = []
    with ad.no_grad():
        for trial in range(warmup + n_trials):
            start = time.perf_counter()
            forward_batch(x, cfg, params, "eval", motion, seed=seed)
            elapsed = time.perf_counter() - start
            if trial >= warmup:
                rates.append(1.0 / elapsed)
    return float(np.mean(rates)), float(np.std(rates))
