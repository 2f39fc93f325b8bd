# %% [markdown]
# # Where each strategy puts its targets
#
# Five ways to choose targets on an 8x8 frame with gamma=4. Targets are drawn
# as `#`.

# %%
import numpy as np

from vtm.motion import attach_motion, synth_motion
from vtm.partition import select_targets
from vtm.tokens import STRATEGIES, TokenTensor

L, H, W = 1, 8, 8
rng = np.random.default_rng(0)
t = attach_motion(TokenTensor.from_grid(rng.normal(size=(L, H, W, 4))),
                  synth_motion("moving_box", (L, H, W), {"box": (3, 3)}, seed=2))
saliency = np.zeros(t.n)
saliency[: W * 2] = 1.0  # pretend the top two rows are salient


def show(idx):
    grid = np.full((H, W), ".")
    grid.reshape(-1)[idx] = "#"
    return "\n".join(" ".join(r) for r in grid)


for s in STRATEGIES:
    idx = select_targets(s, t, 4, np.random.default_rng(3), saliency)
    print(f"{s} ({len(idx)} targets)\n{show(idx)}\n")

# %% [markdown]
# Motion sampling is Gumbel-top-k over the motion logits. The first pick
# follows softmax(motion).

# %%
from vtm.partition import sample_targets_weighted

w = np.array([0.0, 1.0, 2.0])
first = [sample_targets_weighted(w, 1, rng)[0] for _ in range(20000)]
print("empirical:", np.bincount(first) / len(first))
print("softmax:  ", np.exp(w) / np.exp(w).sum())
