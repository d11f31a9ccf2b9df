# %% [markdown]
# # Reverse-mode differentiation on numpy arrays
#
# `aphasiagnn.autodiff` records every operation on a `Tensor` and replays the
# record backwards. This walk-through differentiates a small expression, checks
# it against central differences and replays a tape.

# %%
import numpy as np

from aphasiagnn import autodiff as ad
from aphasiagnn.autodiff import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
W = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

loss = ad.cross_entropy(ad.tanh(x @ W) @ Tensor(np.eye(2, 4)), [0, 3, 1])
ad.backward(loss)
print("loss", loss.item())
print("dL/dW\n", W.grad)

# %% [markdown]
# `grad_check` perturbs each coordinate by +/- eps and reports the worst
# relative disagreement with the analytic gradient.

# %%
f = lambda t: ad.cross_entropy(ad.tanh(x @ t) @ Tensor(np.eye(2, 4)), [0, 3, 1])
print("max relative error", ad.grad_check(f, W))

# %% [markdown]
# Fused primitives (softmax, layer norm, dropout, an LSTM cell) have
# hand-written backward rules.

# %%
g, b = Tensor(np.ones(4), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)
w = Tensor(rng.standard_normal((3, 4)))
print("layer_norm grad error", ad.grad_check(lambda t: (ad.layer_norm(t, g, b) * w).sum(), x))

# %% [markdown]
# A `ComputationTape` keeps the recorded operations in order. `replay`
# recomputes them from the leaves' current values, so editing `x` in place and
# replaying gives the new result without rebuilding the expression.

# %%
with ad.ComputationTape() as tape:
    y = (x * x).sum()
print("ops on tape:", len(tape), "value", y.item())
x.data[...] = 0.5
print("replayed value", tape.replay()[-1], "expected", 0.5 * 0.5 * x.data.size)
