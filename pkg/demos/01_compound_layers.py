# %% [markdown]
# Every conv and fc layer is held as W = U @ V + C. At initialization U is the
# identity and C is zero, so the network behaves exactly like a plain one.

# %%
import numpy as np

from atmc import tensor as T
from atmc.model import count_distinct_nonzero, count_l0, effective_array, forward, init_factorized, lenet, to_dense

T.set_default_dtype(np.float64)
model = init_factorized(lenet(), seed=0)
for i, t in enumerate(model.layers):
    print(f"layer {i}: U {t.U.shape}  V {t.V.shape}  C {t.C.shape}  transposed={t.transposed}")
print("dense weights:", lenet().n_weights())
print("trainable U, V, C entries:", model.n_entries())

# %%
x = np.random.default_rng(0).uniform(size=(4, 1, 28, 28))
gap = np.abs(forward(model, x).data - forward(to_dense(model), x).data).max()
print("max logit gap, factorized vs plain:", gap)

# %% [markdown]
# Two counts drive the constraints: nonzeros, and distinct nonzero values.

# %%
M = np.array([0.0, 1, 4, 1])
print("nonzeros:", count_l0(M), " distinct nonzero values:", count_distinct_nonzero(M))

# %%
t = model.layers[2]
t.C.data[0, 0] = 0.5
print("C shifts one entry of the effective weight:", effective_array(t)[0, 0] - t.V.data[0, 0])
