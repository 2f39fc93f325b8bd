# %% [markdown]
# # One merge step, by hand
#
# A merge step splits tokens into targets and sources, matches each source
# to its most similar target by cosine similarity, keeps only the `R`
# best matches and pools every group.

# %%
import numpy as np

from vtm import MergeConfig, TokenTensor, limit_matches, match_sources, merge, partition_uniform
from vtm.tokens import merged_count

rng = np.random.default_rng(1)
feats = rng.normal(size=(1, 3, 4, 4))  # one frame, 3x4 grid, 4 channels
t = TokenTensor.from_grid(feats)
part = partition_uniform(t, gamma=4)
print("targets:", part.target_idx, " sources:", part.source_idx)

# %%
m = match_sources(t.features, part)
R = merged_count(len(part.source_idx), 0.5)
limited = limit_matches(m, R)
for s, tgt, score in zip(part.source_idx, limited.match_of, m.score_of):
    print(f"source {s:2d} -> {tgt:2d}  cos={score:+.3f}")

# %%
out = merge(t, part, limited, "size_weighted")
print(f"{t.n} tokens -> {out.n} (expected {t.n - R})")
print("sizes:", out.sizes, " total:", out.sizes.sum())

# %% [markdown]
# Size-weighted pooling conserves the size-weighted feature sum.

# %%
before = (t.sizes[:, None] * t.features).sum(axis=0)
after = (out.sizes[:, None] * out.features).sum(axis=0)
print("mass drift:", np.abs(before - after).max())
