# %% [markdown]
# # Attention cost under merging
#
# The analytic cost model follows the token counts forced by the count law.
# Here it is for a 60-frame 16x16 clip with chunks (6, 30, 60).

# %%
from vtm import MergeConfig, NetworkConfig
from vtm.cost import baseline_config, schedule_cost

cfg = NetworkConfig(chunk_lengths=(6, 30, 60), merge=MergeConfig(6, 0.8, "average", "motion"),
                    channels=64, heads=4)
merged = schedule_cost(cfg, 60, 16, 16)
base = schedule_cost(baseline_config(cfg), 60, 16, 16)
for row in merged.rows():
    print(row)
print(f"FLOP reduction {base.flops / merged.flops:.2f}x")
print(f"peak activation floats reduced by {100 * (1 - merged.peak_floats / base.peak_floats):.1f}%")

# %% [markdown]
# Larger gamma leaves fewer targets, so the cost keeps falling.

# %%
from dataclasses import replace

for gamma in (2, 4, 6, 8, 10):
    c = replace(cfg, merge=MergeConfig(gamma, 0.8, "average", "motion"))
    print(gamma, f"{base.flops / schedule_cost(c, 60, 16, 16).flops:.2f}x")
