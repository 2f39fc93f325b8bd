"""Video token merging for chunked long-form video transformers."""

from .tokens import MatchResult, MergeConfig, PartitionResult, TokenTensor, validate
from .merging import limit_matches, match_sources, merge, merge_step, partition_uniform
from .partition import (
    sample_targets_weighted,
    targets_boundary,
    targets_center,
    targets_motion,
    targets_naive,
    targets_saliency,
)
from .network import NetworkConfig, init_params, network_forward, vtm_block_forward
from .training import TrainHyper, evaluate, train

__all__ = [
    "MatchResult",
    "MergeConfig",
    "NetworkConfig",
    "PartitionResult",
    "TokenTensor",
    "TrainHyper",
    "evaluate",
    "init_params",
    "limit_matches",
    "match_sources",
    "merge",
    "merge_step",
    "network_forward",
    "partition_uniform",
    "sample_targets_weighted",
    "targets_boundary",
    "targets_center",
    "targets_motion",
    "targets_naive",
    "targets_saliency",
    "train",
    "validate",
    "vtm_block_forward",
]
