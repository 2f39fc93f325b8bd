# %% [markdown]
# # The autodiff engine
#
# Everything trainable in the package runs on a small reverse-mode engine in
# `vtm.autodiff`. Values live in float32 by default; `precision(np.float64)`
# switches storage for gradient checking.

# %%
import numpy as np

from vtm import autodiff as ad

x = ad.parameter([[1.0, 2.0, 3.0]])
w = ad.parameter([[0.5], [-1.0], [2.0]])
y = ad.tanh_elem(x @ w)
ad.backward(ad.sum_all(y))
print("y =", y.value, " dL/dw =", w.grad.ravel())

# %% [markdown]
# Central differences against the analytic gradient of a layer norm followed
# by a softmax.

# %%
rng = np.random.default_rng(0)
a = rng.normal(size=(3, 5))
with ad.precision(np.float64):
    node = ad.parameter(a.copy())
    ad.backward(ad.sum_all(ad.mul(ad.softmax_rows(ad.layer_norm_rows(node)), ad.constant(a))))

    def f(v):
        return float((ad.softmax_rows(ad.layer_norm_rows(ad.constant(v))).value * a).sum())

    h = 1e-5
    num = np.zeros_like(a)
    for i in np.ndindex(a.shape):
        up, down = a.copy(), a.copy()
        up[i] += h
        down[i] -= h
        num[i] = (f(up) - f(down)) / (2 * h)
print("max |analytic - numeric| =", np.abs(node.grad - num).max())

# %% [markdown]
# Under `no_grad()` no graph is recorded, which is how evaluation runs.

# %%
with ad.no_grad():
    z = ad.parameter(np.ones((2, 2))) @ ad.parameter(np.ones((2, 2)))
print("parents recorded:", len(z.parents))
