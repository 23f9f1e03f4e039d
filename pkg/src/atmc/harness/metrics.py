"""Accuracy, attacked accuracy and storage accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from ..attacks import NO_ATTACK, AttackConfig, attack, input_grad_fn
from ..model import ArchitectureSpec, ModelParams, count_distinct_nonzero, count_l0, predict

CSV_NOTE = "# compression_ratio = size_bits / dense_size_bits; dense = unfactorized network at 32 bits"


def matrix_size_bits(m, b):
    """``b`` bits per nonzero plus a 32-bit float per codebook level when ``b < 32``."""
    nnz = count_l0(m)
    if b >= 32:
        return 32 * nnz
    return b * nnz + 32 * count_distinct_nonzero(m)


def model_size_bits(model: ModelParams, b=32) -> int:
    """Storage of all U, V, C matrices; sparse indices and biases are not counted."""
    return int(sum(matrix_size_bits(m, b) for _, _, m in model.matrices()))


def dense_size_bits(arch: ArchitectureSpec) -> int:
    return 32 * arch.n_weights()


def compression_ratio(model: ModelParams, b=32) -> float:
    return model_size_bits(model, b) / dense_size_bits(model.arch)


def evaluate(model: ModelParams, dataset, attack_cfg: AttackConfig = NO_ATTACK, batch_size=250, limit=None):
    """(clean test accuracy, attacked test accuracy)."""
    x, y = dataset.x_test[:limit], dataset.y_test[:limit]
    if len(x) == 0:
        return float("nan"), float("nan")
    x = x.astype(model.layers[0].V.dtype, copy=False)
    clean = predict(model, x, batch_size)
    ta = float(np.mean(clean == y))
    if attack_cfg.family == "none":
        return ta, ta
    grad_fn = input_grad_fn(model)
    hits = 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        x_adv = attack(grad_fn, xb, yb, attack_cfg)
        hits += int(np.sum(predict(model, x_adv, batch_size) == yb))
    return ta, hits / len(x)


@dataclass
class MetricsRow:
    pipeline: str
    arch: str
    dataset: str
    ratio: float
    k: int
    bits: int
    nnz: int
    distinct: str
    size_bits: int
    dense_size_bits: int
    compression_ratio: float
    checkpoint_bytes: int
    ta: float
    ata: float
    attack: str
    seed: int
    wall_time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("ta", "ata"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")


CSV_FIELDS = [f for f in MetricsRow.__dataclass_fields__ if f != "wall_time"]


def metrics_row(pipeline, model, dataset, bits, ta, ata, attack_cfg, seed, ratio=1.0, k=None,
                checkpoint_bytes=0, wall_time=0.0) -> MetricsRow:
    size = model_size_bits(model, bits)
    dense = dense_size_bits(model.arch)
    return MetricsRow(
        pipeline=pipeline,
        arch=model.arch.name,
        dataset=dataset.name,
        ratio=float(ratio),
        k=-1 if k is None else int(k),
        bits=int(bits),
        nnz=model.total_nnz(),
        distinct=";".join(str(count_distinct_nonzero(m)) for _, _, m in model.matrices()),
        size_bits=size,
        dense_size_bits=dense,
        compression_ratio=size / dense,
        checkpoint_bytes=int(checkpoint_bytes),
        ta=ta,
        ata=ata,
        attack=attack_cfg.describe(),
        seed=int(seed),
        wall_time=wall_time,
    )


def rows_to_csv(rows, include_timing=False) -> str:
    """Stable CSV text; wall time is left out unless asked for so reruns are byte-identical."""
    fields = CSV_FIELDS + (["wall_time"] if include_timing else [])
    buf = io.StringIO()
    buf.write(CSV_NOTE + "\n")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        w.writerow({f: (repr(d[f]) if isinstance(d[f], float) else d[f]) for f in fields})
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))
