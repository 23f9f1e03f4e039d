"""Comparison pipelines, all assembled from the trainer and projection primitives.

Pipelines accept an optional ``pretrained`` dense model so a sweep can train
the dense starting point once and reuse it across pruning ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import NO_ATTACK, AttackConfig
from .model import ModelParams, get_arch, init_factorized, to_dense, to_factorized
from .projections import (
    CompressionConfig,
    project_topk_global,
    support_masks,
    uniform_quantize_model,
)
from .tensor import Tensor
from .trainer import TrainConfig, finalize, train_adversarial, train_atmc

KINDS = ("nap", "da", "ap", "al0", "alr", "atmc", "atmc_uniform_pq")


@dataclass
class PipelineSpec:
    kind: str
    ratio: float = 1.0  # pruning ratio, or rank fraction for alr
    bits: int = 32
    attack: AttackConfig = NO_ATTACK
    epochs: int = 10
    finetune_epochs: int | None = None  # defaults to half of epochs
    patience: int = 5
    arch: str = "lenet"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    rho: float = 1e-2
    mirror_period: int = 1
    warmup_epochs: int = 0  # clean epochs at the start of dense adversarial pretraining
    ramp_epochs: int = 0  # then the attack budget ramps up linearly over this many epochs

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pipeline {self.kind!r}; choose from {KINDS}")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        if not 1 <= self.bits <= 32:
            raise ValueError("bits must be in [1, 32]")

    @property
    def ft_epochs(self):
        return self.finetune_epochs if self.finetune_epochs is not None else max(1, self.epochs // 2)

    def budget(self, arch):
        """Global nonzero budget ``floor(ratio * dense weight count)``."""
        return int(math.floor(self.ratio * arch.n_weights()))

    def train_config(self, epochs, attack, **kw):
        kw = {"warmup_epochs": 0, "ramp_epochs": 0, **kw}
        return replace(self.train, epochs=epochs, attack=attack, seed=self.seed, **kw)


def _arch(spec, data):
    if spec.arch == "mlp-small":
        side = data.x_train.shape[-1]
        return get_arch("mlp-small", n_classes=data.n_classes, side=side)
    if spec.arch == "convnet-small":
        return get_arch("convnet-small", n_classes=data.n_classes)
    return get_arch(spec.arch)


def _dense_start(spec, data):
    return init_factorized(_arch(spec, data), spec.seed, factorized=False, dtype=data.x_train.dtype)


def _plateau_stop(patience):
    best = [math.inf, 0]

    def stop(model, info):
        if info["loss"] < best[0] - 1e-4:
            best[0], best[1] = info["loss"], 0
        else:
            best[1] += 1
        return best[1] >= patience

    return stop


def pretrain(spec: PipelineSpec, data, adversarial: bool) -> ModelParams:
    """Dense training: plain for NAP, adversarial for everything else.

    Only this stage uses the warm-up and budget ramp; fine-tuning always runs
    at the full budget.
    """
    attack = spec.attack if adversarial else NO_ATTACK
    cfg = spec.train_config(spec.epochs, attack, warmup_epochs=spec.warmup_epochs, ramp_epochs=spec.ramp_epochs)
    return train_adversarial(_dense_start(spec, data), data, cfg)


def _prune_and_finetune(spec, data, dense, attack):
    dense = to_dense(dense)
    k = spec.budget(dense.arch)
    pruned = project_topk_global(dense, k)
    masks = support_masks(pruned)
    cfg = spec.train_config(spec.ft_epochs, attack)
    return train_adversarial(pruned, data, cfg, masks=masks, epoch_callback=_plateau_stop(spec.patience))


def run_da(spec: PipelineSpec, data, pretrained=None) -> ModelParams:
    return pretrained.copy() if pretrained is not None else pretrain(spec, data, True)


def run_nap(spec: PipelineSpec, data, pretrained=None) -> ModelParams:
    """Plain training, global magnitude pruning, then plain fine-tuning on the frozen support."""
    dense = pretrained if pretrained is not None else pretrain(spec, data, False)
    if spec.ratio >= 1:
        return dense.copy()
    return _prune_and_finetune(spec, data, dense, NO_ATTACK)


def run_ap(spec: PipelineSpec, data, pretrained=None) -> ModelParams:
    """As NAP, but pre-training and fine-tuning are adversarial."""
    dense = pretrained if pretrained is not None else pretrain(spec, data, True)
    if spec.ratio >= 1:
        return dense.copy()
    return _prune_and_finetune(spec, data, dense, spec.attack)


def run_al0(spec: PipelineSpec, data, pretrained=None) -> ModelParams:
    """Adversarial training with a global top-k projection after every step.

    Only the plain weights are pruned (dense form: U is the identity, C is zero).
    """
    dense = to_dense(pretrained if pretrained is not None else pretrain(spec, data, True))
    k = spec.budget(dense.arch)
    cfg = spec.train_config(spec.ft_epochs, spec.attack)
    return train_adversarial(dense, data, cfg, k=k)


# -- low rank ----------------------------------------------------------------------


def low_rank_factorize(model: ModelParams, fraction) -> tuple[ModelParams, dict]:
    """Truncated SVD of each layer's matrix to rank ``ceil(fraction * n)``.

    ``W ~ A @ B`` with ``A = P_r diag(s_r)`` (m x r) and ``B = Q_r^T`` (r x n) is
    stored in the triple as ``U = [A | 0]``, ``V = [B ; 0]``, ``C = 0``.  The
    returned masks pin those zero blocks during fine-tuning.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    dense = to_dense(model)
    out = to_factorized(dense)
    masks = {}
    for li, (t, td) in enumerate(zip(out.layers, dense.layers)):
        w = td.V.data.astype(np.float64)
        m, n = w.shape
        r = min(n, math.ceil(fraction * n))
        try:
            p, s, qt = np.linalg.svd(w, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"SVD failed for layer {li} ({m}x{n}): {exc}") from exc
        u = np.zeros((m, m))
        u[:, :r] = p[:, :r] * s[:r]
        v = np.zeros((m, n))
        v[:r] = qt[:r]
        dtype = t.V.dtype
        t.U = Tensor(u.astype(dtype), requires_grad=True)
        t.V = Tensor(v.astype(dtype), requires_grad=True)
        t.C = Tensor(np.zeros((m, n), dtype=dtype), requires_grad=True)
        mu = np.zeros((m, m), dtype=bool)
        mu[:, :r] = True
        mv = np.zeros((m, n), dtype=bool)
        mv[:r] = True
        masks[(li, "U")] = mu
        masks[(li, "V")] = mv
        masks[(li, "C")] = np.zeros((m, n), dtype=bool)
    return out, masks


def rank_fraction_for_ratio(arch, ratio):
    """Largest rank fraction whose factor storage ``sum r (m + n)`` fits ``ratio`` of the dense count."""
    shapes = [sorted(l.raw_shape, reverse=True) for l in arch.weighted_layers()]
    total = arch.n_weights()

    def cost(f):
        return sum(min(n, math.ceil(f * n)) * (m + n) for m, n in shapes)

    lo, hi = 1e-6, 1.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if cost(mid) <= ratio * total:
            lo = mid
        else:
            hi = mid
    return lo


def run_alr(spec: PipelineSpec, data, pretrained=None) -> ModelParams:
    """Adversarial pre-training, truncated SVD per layer, adversarial fine-tuning of the factors."""
    dense = pretrained if pretrained is not None else pretrain(spec, data, True)
    factored, masks = low_rank_factorize(dense, spec.ratio)
    cfg = spec.train_config(spec.ft_epochs, spec.attack)
    return train_adversarial(factored, data, cfg, masks=masks, epoch_callback=_plateau_stop(spec.patience))


# -- ATMC ------------------------------------------------------------------------------


def atmc_config(spec: PipelineSpec, arch, bits=None, from_scratch=False) -> TrainConfig:
    comp = replace(spec.train.compression, k=spec.budget(arch), b=bits or spec.bits, rho=spec.rho)
    schedule = {"warmup_epochs": spec.warmup_epochs, "ramp_epochs": spec.ramp_epochs} if from_scratch else {}
    return spec.train_config(spec.epochs, spec.attack, compression=comp, mirror_period=spec.mirror_period,
                             **schedule)


def run_atmc(spec: PipelineSpec, data, pretrained=None, history=None) -> ModelParams:
    """ADMM training followed by ``finalize``.

    Starts from ``U=I, V=W0, C=0`` with ``W0`` either a fresh initialization or
    the effective weights of ``pretrained``.  A run from scratch uses the
    same warm-up and budget ramp as dense pretraining.
    """
    if pretrained is not None:
        theta = to_factorized(pretrained)
    else:
        theta = init_factorized(_arch(spec, data), spec.seed, dtype=data.x_train.dtype)
    cfg = atmc_config(spec, theta.arch, from_scratch=pretrained is None)
    state = train_atmc(theta, data, cfg, history=history)
    return finalize(state, cfg.compression, seed=spec.seed)


def run_atmc_uniform_pq(spec: PipelineSpec, data, pretrained=None, atmc32=None, bits=8) -> ModelParams:
    """ATMC at 32 bits, then uniform ``bits``-bit quantization of each matrix, no retraining."""
    if atmc32 is None:
        atmc32 = run_atmc(replace(spec, kind="atmc", bits=32), data, pretrained)
    return uniform_quantize_model(atmc32, bits)


def run_pipeline(spec: PipelineSpec, data, pretrained=None) -> ModelParams:
    runners = {
        "nap": run_nap, "da": run_da, "ap": run_ap, "al0": run_al0,
        "alr": run_alr, "atmc": run_atmc,
        "atmc_uniform_pq": lambda s, d, p=None: run_atmc_uniform_pq(s, d, p, bits=s.bits if s.bits < 32 else 8),
    }
    return runners[spec.kind](spec, data, pretrained)


def storage_bits(spec: PipelineSpec):
    """Bit width used for size accounting of a pipeline's output."""
    if spec.kind in ("atmc", "atmc_uniform_pq"):
        return spec.bits if spec.kind == "atmc" else (spec.bits if spec.bits < 32 else 8)
    return 32
