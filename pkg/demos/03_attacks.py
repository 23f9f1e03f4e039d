# %% [markdown]
# PGD and FGSM stay inside the l-inf ball; WRM trades loss against a
# quadratic transport penalty instead, so its move is not capped by delta.

# %%
import numpy as np

from atmc import tensor as T
from atmc.attacks import AttackConfig, attack
from atmc.harness.data import synth_dataset
from atmc.harness.metrics import evaluate
from atmc.model import get_arch, init_factorized
from atmc.trainer import TrainConfig, train_adversarial

T.set_default_dtype(np.float64)
data = synth_dataset(8, 2, seed=0, dtype=np.float64)
plain = train_adversarial(init_factorized(get_arch("mlp-small"), 0, factorized=False), data,
                          TrainConfig(epochs=10, batch_size=32, lr=0.1, momentum=0.9))

# %%
x, y = data.x_test[:64], data.y_test[:64]
for cfg in (AttackConfig("fgsm", 0.2), AttackConfig("pgd", 0.2, 10), AttackConfig("wrm", 0.2, 10, wrm_gamma=1.3, alpha=1.0)):
    dx = (attack(plain, x, y, cfg) - x).reshape(len(x), -1)
    print(f"{cfg.describe():34s} max |dx| {np.abs(dx).max():.2e}  mean l2 {np.linalg.norm(dx, axis=1).mean():.2e}")

# %% [markdown]
# WRM barely moves here: the trained model is so confident that its input
# gradients are tiny next to the gamma-weighted penalty. PGD and FGSM always
# step a fixed amount in sign direction, whatever the gradient size.

# %% [markdown]
# Training against the attack buys robustness at that budget.

# %%
pgd = AttackConfig("pgd", 0.3, 5)
robust = train_adversarial(init_factorized(get_arch("mlp-small"), 0, factorized=False), data,
                           TrainConfig(epochs=10, batch_size=32, lr=0.1, momentum=0.9, attack=pgd))
for name, m in (("plain", plain), ("adversarial", robust)):
    ta, ata = evaluate(m, data, pgd)
    print(f"{name:12s} TA {ta:.3f}  ATA {ata:.3f}")
