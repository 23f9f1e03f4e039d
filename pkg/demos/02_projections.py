# %% [markdown]
# The two projections behind the constraints: a global top-k over every
# matrix at once, and ZeroKmeans, a 1-D k-means whose zero center stays put.

# %%
import numpy as np

from atmc.model import get_arch, init_factorized
from atmc.projections import project_topk_global, uniform_quantize, zero_kmeans, zero_kmeans_model

model = init_factorized(get_arch("mlp-small"), seed=0)
sparse = project_topk_global(model, 300)
for i, name, m in sparse.matrices():
    print(f"layer {i} {name}: kept {np.count_nonzero(m.data):5d} of {m.data.size}")

# %% [markdown]
# The identity diagonal of U survives top-k: its entries are 1.0, far above
# the initial weights.

# %%
rng = np.random.default_rng(1)
w = rng.normal(size=(40, 30)) * (rng.uniform(size=(40, 30)) < 0.3)
for b in (1, 2, 3):
    book, q = zero_kmeans(w, 2 ** b)
    print(f"b={b}: levels {np.round(book.values, 3)}")
    print(f"      ZeroKmeans error {np.sum((w - q) ** 2):.3f}, uniform error {np.sum((w - uniform_quantize(w, b)) ** 2):.3f}")

# %%
quant = zero_kmeans_model(sparse, 2)
print("distinct values per matrix:", [len(np.unique(m.data[m.data != 0])) for _, _, m in quant.matrices()])
