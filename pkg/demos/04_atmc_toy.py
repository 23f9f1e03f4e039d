# %% [markdown]
# ADMM on a toy problem: theta is kept sparse by top-k after every SGD step,
# theta' is its quantized mirror, u the scaled dual. The residual
# ||theta - theta'|| shrinks as the penalty pulls theta onto the codebook.

# %%
import tempfile
from pathlib import Path

import numpy as np

from atmc import tensor as T
from atmc.attacks import AttackConfig
from atmc.harness.checkpoint import load_checkpoint, save_checkpoint
from atmc.harness.data import synth_dataset
from atmc.harness.metrics import compression_ratio, evaluate, model_size_bits
from atmc.model import get_arch, init_factorized
from atmc.projections import CompressionConfig
from atmc.trainer import TrainConfig, finalize, train_atmc

T.set_default_dtype(np.float64)
data = synth_dataset(8, 2, seed=0, dtype=np.float64)
atk = AttackConfig("pgd", 0.1, 3)
comp = CompressionConfig(k=600, b=2, rho=0.5)
cfg = TrainConfig(epochs=6, batch_size=16, lr=0.05, momentum=0.9, attack=atk, compression=comp)

history = []
state = train_atmc(init_factorized(get_arch("mlp-small"), 0), data, cfg, history=history)
for h in history:
    print(f"epoch {h['epoch']}: adv loss {h['adv_loss']:.3f}  residual {h['residual']:.4f}  "
          f"nnz {h['nnz']}  distinct {h['distinct']}")

# %%
model = finalize(state, comp)
ta, ata = evaluate(model, data, atk)
print(f"TA {ta:.3f}  ATA {ata:.3f}  size {model_size_bits(model, 2)} bits  ratio {compression_ratio(model, 2):.4f}")

# %%
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "toy.atmc"
    nbytes = save_checkpoint(model, path, 2)
    same = load_checkpoint(path).flat().tobytes() == model.flat().tobytes()
    print(f"checkpoint {nbytes} bytes, round trip identical: {same}")
