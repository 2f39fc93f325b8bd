# %% [markdown]
# # Saliency-guided attention
#
# The auxiliary path adds each key token's saliency to the attention logits.
# With zero saliency it is plain self-attention. A constant shift in
# saliency has no effect because softmax ignores it.

# %%
import numpy as np

from vtm import autodiff as ad
from vtm.attention import attention_weights, init_attention, saliency_guided_attention, self_attention

rng = np.random.default_rng(0)
p = init_attention(8, 8, 2, rng)
x = rng.normal(size=(6, 8)).astype(np.float32)

plain = self_attention(ad.constant(x), p).out.value
zero = saliency_guided_attention(ad.constant(x), p, ad.constant(np.zeros((6, 1)))).value
print("s = 0 differs by", np.abs(plain - zero).max())

# %% [markdown]
# Raising one token's saliency pulls attention towards it.

# %%
s = np.zeros(6)
for boost in (0.0, 0.5, 1.0):
    s[2] = boost
    a = attention_weights(x, p, s)
    print(f"s[2]={boost:.1f}: mean weight on token 2 = {a[..., 2].mean():.3f}")
