import os
import sys
from pathlib import Path

import numpy as np
import pytest

from atmc import tensor as T
from atmc.harness.data import DATA_DIR_ENV, MNIST_FILES, export_mnist_subset


@pytest.fixture(autouse=True)
def float64_default():
    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(old)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Real MNIST IDX files: $ATMC_DATA_DIR if set, else the bundled 5k sample written to disk."""
    env = os.environ.get(DATA_DIR_ENV)
    if env and all((Path(env) / f).exists() or (Path(env) / (f + ".gz")).exists() for f in MNIST_FILES.values()):
        return Path(env)
    pytest.importorskip("mlxtend")
    return export_mnist_subset(tmp_path_factory.mktemp("mnist5k"))


@pytest.fixture(scope="session")
def toy_data():
    from atmc.harness.data import synth_dataset

    return synth_dataset(8, 2, n_train=512, n_test=256, seed=0, dtype=np.float64)


@pytest.fixture(scope="session")
def trained_mlp(toy_data):
    """mlp-small trained plainly on the 8x8 toy set (float64)."""
    from atmc.model import get_arch, init_factorized
    from atmc.trainer import TrainConfig, train_adversarial

    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    model = init_factorized(get_arch("mlp-small"), 0, factorized=False)
    model = train_adversarial(model, toy_data, TrainConfig(epochs=10, batch_size=32, lr=0.1, momentum=0.9))
    T.set_default_dtype(old)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "ACCEPTANCE", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    lines = [results[k] for k in sorted(results)]
    for line in lines:
        terminalreporter.write_line(line)
    (Path(__file__).parent / "acceptance_results.txt").write_text("\n".join(lines) + "\n")
