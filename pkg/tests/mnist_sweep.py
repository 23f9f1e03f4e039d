"""Desk-scale MNIST comparison of the pipelines at one pruning ratio.

Shared by the acceptance test and by manual calibration runs
(``python3 tests/mnist_sweep.py DIR SEED``).
"""

import logging
import sys
import time
from dataclasses import replace

import numpy as np

from atmc import tensor as T
from atmc.attacks import AttackConfig
from atmc.baselines import (
    PipelineSpec,
    pretrain,
    run_al0,
    run_ap,
    run_atmc,
    run_atmc_uniform_pq,
    run_nap,
    storage_bits,
)
from atmc.harness.data import load_mnist
from atmc.harness.metrics import evaluate, model_size_bits
from atmc.projections import CompressionConfig
from atmc.trainer import TrainConfig

ATTACK = AttackConfig.from_255("pgd", 76, 16)
RATIO = 0.05
TRAIN = TrainConfig(batch_size=32, lr=0.02, momentum=0.9, compression=CompressionConfig(zk_n_init=1))

log = logging.getLogger("mnist_sweep")


def specs(seed):
    base = dict(arch="lenet", seed=seed, attack=ATTACK, train=TRAIN, epochs=10, finetune_epochs=5)
    return {
        # two clean epochs, a three-epoch ramp, then ten at full budget
        "da": PipelineSpec("da", warmup_epochs=2, ramp_epochs=3, **{**base, "epochs": 15}),
        "nap": PipelineSpec("nap", ratio=RATIO, **base),
        "ap": PipelineSpec("ap", ratio=RATIO, **base),
        "al0": PipelineSpec("al0", ratio=RATIO, **base),
        # ADMM runs as long as the other pipelines fine-tune
        "atmc32": PipelineSpec("atmc", ratio=RATIO, bits=32, **{**base, "epochs": 5}),
        "atmc8": PipelineSpec("atmc", ratio=RATIO, bits=8, **{**base, "epochs": 5}),
        "uniform8": PipelineSpec("atmc_uniform_pq", ratio=RATIO, bits=8, **{**base, "epochs": 5}),
    }


def run_seed(data, seed):
    """Train every pipeline for one seed; returns {name: {ta, ata, size_bits, nnz}}."""
    s = specs(seed)
    models = {}
    t0 = time.time()

    def done(name, model):
        models[name] = model
        log.info("seed %d %s trained (%.0fs)", seed, name, time.time() - t0)

    da = pretrain(s["da"], data, adversarial=True)
    done("da", da)
    done("nap", run_nap(s["nap"], data))
    done("ap", run_ap(s["ap"], data, da))
    done("al0", run_al0(s["al0"], data, da))
    done("atmc32", run_atmc(s["atmc32"], data, da))
    done("atmc8", run_atmc(s["atmc8"], data, da))
    done("uniform8", run_atmc_uniform_pq(s["uniform8"], data, atmc32=models["atmc32"], bits=8))

    out = {}
    for name, model in models.items():
        ta, ata = evaluate(model, data, ATTACK)
        out[name] = {
            "ta": ta, "ata": ata, "nnz": model.total_nnz(),
            "size_bits": model_size_bits(model, storage_bits(s[name])),
        }
        log.info("seed %d %-8s TA %.4f ATA %.4f nnz %d size_bits %d", seed, name, ta, ata,
                 out[name]["nnz"], out[name]["size_bits"])
    return out


def load(directory):
    old = T.get_default_dtype()
    T.set_default_dtype(np.float32)
    try:
        return load_mnist(directory, dtype=np.float32)
    finally:
        T.set_default_dtype(old)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    T.set_default_dtype(np.float32)
    result = run_seed(load(sys.argv[1]), int(sys.argv[2]))
    for k, v in result.items():
        print(k, v, flush=True)
