# %% [markdown]
# # Training on planted saliency
#
# A small synthetic task: background tokens are noise, and a few tokens per
# frame carry an object pattern plus a class pattern. A learnable-VTM
# network learns to score those tokens as salient.

# %%
import numpy as np

from vtm import MergeConfig, NetworkConfig, TrainHyper, evaluate, train
from vtm.data import SynthConfig, generate

# about a minute on one core
ds = generate(SynthConfig(samples_per_class=24, grid=(16, 8, 8), channels=64, k_sig=6, seed=0))
cfg = NetworkConfig(chunk_lengths=(4, 8, 16), merge=MergeConfig(6, 0.8, "average", "learnable"),
                    channels=64, heads=2, n_classes=4)
params, log = train(ds.train, cfg, TrainHyper(epochs=8, batch=8), val=ds.val)
for row in log:
    print({k: round(v, 3) if isinstance(v, float) else v for k, v in row.items()})

# %%
m = evaluate(ds.val, params, cfg)
print(f"val accuracy {m['accuracy']:.2f}")
print(f"saliency: signal {m['saliency_signal']:+.3f}, background {m['saliency_background']:+.3f}")
print("tokens per block:", m["token_trace"])
