import gzip
import struct

import numpy as np
import pytest

from atmc.harness.data import (
    IMAGES_MAGIC,
    LABELS_MAGIC,
    MNIST_FILES,
    IdxFormatError,
    encode_idx,
    load_dataset,
    load_mnist,
    parse_idx,
    synth_dataset,
    write_mnist_idx,
)


def tiny_mnist(tmp_path, n_train=6, n_test=3):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, size=(n_train + n_test, 28, 28), dtype=np.uint8)
    y = rng.integers(0, 10, size=n_train + n_test).astype(np.uint8)
    write_mnist_idx(tmp_path, x[:n_train], y[:n_train], x[n_train:], y[n_train:])
    return x, y


def test_header_is_big_endian():
    raw = encode_idx(np.arange(6, dtype=np.uint8).reshape(1, 2, 3), IMAGES_MAGIC)
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert raw[4:16] == b"\x00\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00\x03"
    assert parse_idx(raw, IMAGES_MAGIC).tolist() == [[[0, 1, 2], [3, 4, 5]]]


def test_load_scales_bytes_exactly(tmp_path):
    x, y = tiny_mnist(tmp_path)
    x[0, 0, 0], x[0, 0, 1] = 255, 0
    write_mnist_idx(tmp_path, x[:6], y[:6], x[6:], y[6:])
    data = load_mnist(tmp_path)
    assert data.x_train.shape == (6, 1, 28, 28) and data.x_test.shape == (3, 1, 28, 28)
    assert data.x_train[0, 0, 0, 0] == 1.0 and data.x_train[0, 0, 0, 1] == 0.0
    np.testing.assert_array_equal(data.x_train[:, 0], x[:6].astype(np.float32) / np.float32(255))
    np.testing.assert_array_equal(data.y_test, y[6:])
    assert data.x_train.min() >= 0 and data.x_train.max() <= 1


def test_gzip_and_env_var(tmp_path, monkeypatch):
    x, y = tiny_mnist(tmp_path)
    for name in MNIST_FILES.values():
        p = tmp_path / name
        (tmp_path / (name + ".gz")).write_bytes(gzip.compress(p.read_bytes()))
        p.unlink()
    monkeypatch.setenv("ATMC_DATA_DIR", str(tmp_path))
    data = load_mnist()
    assert data.x_train.shape == (6, 1, 28, 28)
    monkeypatch.delenv("ATMC_DATA_DIR")
    with pytest.raises(FileNotFoundError):
        load_mnist()


def corrupt_cases(tmp_path):
    """Five broken directories, each a different failure."""
    good_images = encode_idx(np.zeros((2, 28, 28), np.uint8), IMAGES_MAGIC)
    good_labels = encode_idx(np.zeros(2, np.uint8), LABELS_MAGIC)
    cases = {
        "bad magic": (struct.pack(">I", 0x00000903) + good_images[4:], good_labels),
        "truncated header": (good_images[:2], good_labels),
        "truncated payload": (good_images[:-10], good_labels),
        "trailing bytes": (good_images + b"\x00\x00", good_labels),
        "count mismatch": (good_images, encode_idx(np.zeros(3, np.uint8), LABELS_MAGIC)),
    }
    for name, (images, labels) in cases.items():
        d = tmp_path / name.replace(" ", "_")
        write_mnist_idx(d, np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8),
                        np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8))
        (d / MNIST_FILES["train_images"]).write_bytes(images)
        (d / MNIST_FILES["train_labels"]).write_bytes(labels)
        yield name, d


def test_corrupt_files_have_distinct_diagnostics(tmp_path):
    messages = {}
    for name, d in corrupt_cases(tmp_path):
        with pytest.raises(IdxFormatError) as exc:
            load_mnist(d)
        messages[name] = str(exc.value)
    assert "0x00000903" in messages["bad magic"] and "offset 0" in messages["bad magic"]
    assert "truncated" in messages["truncated header"]
    assert "truncated payload" in messages["truncated payload"]
    assert "trailing" in messages["trailing bytes"]
    assert "2 images but 3 labels" in messages["count mismatch"]
    assert len(set(messages.values())) == 5


def test_label_range_and_rank_checked(tmp_path):
    tiny_mnist(tmp_path)
    (tmp_path / MNIST_FILES["test_labels"]).write_bytes(encode_idx(np.full(3, 11, np.uint8), LABELS_MAGIC))
    with pytest.raises(IdxFormatError, match="out of range"):
        load_mnist(tmp_path)
    with pytest.raises(ValueError):
        encode_idx(np.zeros((2, 2)), LABELS_MAGIC)


def test_real_mnist_shapes(mnist_dir):
    data = load_mnist(mnist_dir)
    if len(data.x_train) != 60_000:
        pytest.skip(f"full MNIST not available (found {len(data.x_train)} training images)")
    assert data.x_train.shape == (60000, 1, 28, 28) and data.x_test.shape == (10000, 1, 28, 28)


def test_bundled_sample_is_sane(mnist_dir):
    data = load_mnist(mnist_dir)
    assert data.x_train.ndim == 4 and data.x_train.shape[1:] == (1, 28, 28)
    assert set(np.unique(data.y_train)) == set(range(10))
    assert 0 <= data.x_train.min() and data.x_train.max() == 1.0


def test_synth_is_deterministic():
    a, b = synth_dataset(seed=3), synth_dataset(seed=3)
    assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_test.tobytes() == b.y_test.tobytes()
    assert synth_dataset(seed=4).x_train.tobytes() != a.x_train.tobytes()


def bisector_margin(x, y, protos):
    """Brute-force per-pair distance to the perpendicular bisector, minimum over wrong classes."""
    out = []
    for xi, yi in zip(x, y):
        p = protos[yi]
        best = np.inf
        for c, q in enumerate(protos):
            if c == yi:
                continue
            normal = (p - q) / np.linalg.norm(p - q)
            best = min(best, float((xi - (p + q) / 2) @ normal))
        out.append(best)
    return np.array(out)


@pytest.mark.parametrize("side,classes,margin", [(8, 2, 0.5), (28, 10, 1.0)])
def test_synth_margin_and_range(side, classes, margin):
    data = synth_dataset(side, classes, n_train=200, n_test=100, seed=1, noise=0.25, margin=margin,
                         dtype=np.float64)
    protos = data.meta["prototypes"]
    for x, y in ((data.x_train, data.y_train), (data.x_test, data.y_test)):
        flat = x.reshape(len(x), -1)
        assert np.all(bisector_margin(flat, y, protos) >= margin - 1e-12)
        assert flat.min() >= 0 and flat.max() <= 1 and y.max() < classes
        # nearest-centroid classification is perfect, so the classes are linearly separable
        d = ((flat[:, None] - protos[None]) ** 2).sum(-1)
        assert np.all(d.argmin(1) == y)


def test_synth_train_test_disjoint():
    data = synth_dataset(8, 2, seed=0)
    train = {r.tobytes() for r in data.x_train}
    assert not any(r.tobytes() in train for r in data.x_test)


def test_load_dataset_names():
    assert load_dataset("synth8").x_train.shape[1:] == (1, 8, 8)
    with pytest.raises(ValueError):
        load_dataset("cifar")
