"""Adversarial training, with and without the ADMM compression constraints.

The ADMM loop keeps three model-shaped variables: ``theta`` (always within
the nonzero budget), ``theta_prime`` (always quantization feasible) and the
scaled dual ``u``.  One step is

1. craft adversarial inputs against the current ``theta``;
2. ``theta <- topk(theta - lr * grad[f(theta; x_adv) + rho/2 ||theta - theta' + u||^2])``;
3. ``theta' <- ZeroKmeans(theta + u)`` per matrix (every ``mirror_period`` steps);
4. ``u <- u + theta - theta'``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import NO_ATTACK, AttackConfig, attack
from .model import ModelParams, count_distinct_nonzero, forward
from .projections import (
    CompressionConfig,
    project_topk_global,
    zero_kmeans,
    zero_kmeans_model,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    lr_milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    attack: AttackConfig = NO_ATTACK
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    mirror_period: int = 1
    warmup_epochs: int = 0  # clean epochs before the attack is switched on
    ramp_epochs: int = 0  # then the attack budget grows linearly over this many epochs

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.ramp_epochs < 0:
            raise ValueError("warmup_epochs and ramp_epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.mirror_period < 1:
            raise ValueError("mirror_period must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch):
        """Step-decayed learning rate for a (0-based) epoch."""
        passed = sum(epoch >= m * self.epochs for m in self.lr_milestones)
        return self.lr * self.lr_decay ** passed

    def attack_at(self, epoch):
        """Attack used during a (0-based) epoch, after warm-up and budget ramp."""
        if self.attack.family == "none":
            return self.attack
        if epoch < self.warmup_epochs:
            return NO_ATTACK
        j = epoch - self.warmup_epochs
        if j < self.ramp_epochs:
            return self.attack.with_delta(self.attack.delta * (j + 1) / self.ramp_epochs)
        return self.attack


@dataclass
class AdmmState:
    theta: ModelParams
    theta_prime: ModelParams
    u: ModelParams
    t: int = 0
    velocity: dict = field(default_factory=dict)


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def adv_loss(model: ModelParams, x, y, attack_cfg: AttackConfig = NO_ATTACK):
    """Mean loss on adversarial versions of ``(x, y)``, as a graph node.

    The adversarial inputs are built against the current weights and then
    treated as constant data, so gradients reach the parameters only.
    """
    x_adv = attack(model, x, y, attack_cfg)
    return T.softmax_cross_entropy(forward(model, x_adv), y)


def _sgd_update(params, grads, lr, momentum, velocity):
    for p, g in zip(params, grads):
        if momentum:
            v = velocity.get(id(p))
            v = g.copy() if v is None else momentum * v + g
            velocity[id(p)] = v
            g = v
        p.data -= lr * g


def _loss_and_grads(model, x, y, attack_cfg, step):
    model.zero_grad()
    try:
        loss = adv_loss(model, x, y, attack_cfg)
    except FloatingPointError as exc:
        log.error("non-finite values at step %d: %s", step, exc)
        raise FloatingPointError(f"step {step}: {exc}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        log.error("non-finite loss at step %d", step)
        raise FloatingPointError(f"non-finite loss at step {step}")
    loss.backward()
    params = model.parameters()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    return value, params, grads


def _as_arrays(data):
    if isinstance(data, tuple):
        return data
    return data.x_train, data.y_train


# -- plain / dense adversarial training -----------------------------------------


def train_adversarial(model: ModelParams, data, cfg: TrainConfig, masks=None, k=None,
                      callback=None, epoch_callback=None) -> ModelParams:
    """Minibatch SGD on the adversarial loss (plain training when the attack is ``none``).

    ``masks`` freezes the support of matching matrices; ``k`` applies a global
    top-k projection after every step.  Works on a copy of ``model``.
    """
    model = model.copy()
    x_all, y_all = _as_arrays(data)
    rng = np.random.default_rng(cfg.seed)
    velocity = {}
    mats = model.matrices()
    step = 0
    if masks is not None:
        _apply_masks(model, masks)
    if k is not None:
        project_topk_global(model, k, inplace=True)
    for epoch in range(cfg.epochs):
        lr, atk = cfg.lr_at(epoch), cfg.attack_at(epoch)
        losses = []
        for idx in minibatches(len(x_all), cfg.batch_size, rng):
            value, params, grads = _loss_and_grads(model, x_all[idx], y_all[idx], atk, step)
            if masks is not None:
                for (i, name, m), g in zip(mats, grads):
                    mk = masks.get((i, name))
                    if mk is not None:
                        g *= mk
            _sgd_update(params, grads, lr, cfg.momentum, velocity)
            if masks is not None:
                _apply_masks(model, masks)
            if k is not None:
                project_topk_global(model, k, inplace=True)
            losses.append(value)
            if callback is not None:
                callback(model, {"step": step, "epoch": epoch, "loss": value})
            step += 1
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log.info("epoch %d lr %.4g loss %.4f", epoch, lr, mean_loss)
        if epoch_callback is not None and epoch_callback(model, {"epoch": epoch, "loss": mean_loss}):
            break
    return model


def _apply_masks(model, masks):
    for i, name, m in model.matrices():
        mk = masks.get((i, name))
        if mk is not None:
            m.data *= mk


# -- ADMM ------------------------------------------------------------------------------


def init_admm(theta: ModelParams) -> AdmmState:
    """``theta' = theta`` and ``u = 0``."""
    theta = theta.copy()
    return AdmmState(theta=theta, theta_prime=theta.copy(), u=theta.zeros_like())


def _mirror_update(state: AdmmState, comp: CompressionConfig, seed):
    B = 2 ** comp.b
    pairs = zip(state.theta.matrices(), state.u.matrices(), state.theta_prime.matrices())
    for j, ((_, _, th), (_, _, uu), (_, _, tp)) in enumerate(pairs):
        target = th.data + uu.data
        _, q = zero_kmeans(target, B, comp.zk_max_iters, comp.zk_tol,
                            seed=seed * 1_000_003 + j, n_init=comp.zk_n_init)
        tp.data[...] = q


def primal_residual(state: AdmmState):
    sq = 0.0
    for (_, _, a), (_, _, b) in zip(state.theta.matrices(), state.theta_prime.matrices()):
        sq += float(np.sum((a.data.astype(np.float64) - b.data) ** 2))
    return float(np.sqrt(sq))


def admm_step(state: AdmmState, x, y, cfg: TrainConfig, lr=None, objective=None, attack_cfg=None) -> dict:
    """One ADMM iteration on the batch ``(x, y)``; updates ``state`` in place.

    ``objective(theta) -> (value, grads)`` replaces the adversarial loss when
    given, with ``grads`` aligned to ``theta.parameters()``.  ``lr`` and
    ``attack_cfg`` default to the values in ``cfg``.
    """
    comp = cfg.compression
    lr = cfg.lr if lr is None else lr
    theta = state.theta
    if objective is None:
        atk = cfg.attack if attack_cfg is None else attack_cfg
        value, params, grads = _loss_and_grads(theta, x, y, atk, state.t)
    else:
        params = theta.parameters()
        value, grads = objective(theta)
        grads = [np.array(g, dtype=p.dtype) for p, g in zip(params, grads)]
    if comp.rho:
        pairs = zip(theta.matrices(), state.theta_prime.matrices(), state.u.matrices())
        for g, ((_, _, th), (_, _, tp), (_, _, uu)) in zip(grads, pairs):
            g += comp.rho * (th.data - tp.data + uu.data)
    _sgd_update(params, grads, lr, cfg.momentum, state.velocity)
    project_topk_global(theta, comp.k, inplace=True)

    if state.t % cfg.mirror_period == 0:
        _mirror_update(state, comp, cfg.seed + state.t)
    for (_, _, uu), (_, _, th), (_, _, tp) in zip(state.u.matrices(), theta.matrices(),
                                                    state.theta_prime.matrices()):
        uu.data += th.data - tp.data

    info = {
        "step": state.t,
        "loss": value,
        "residual": primal_residual(state),
        "nnz": theta.total_nnz(),
    }
    state.t += 1
    return info


def train_atmc(theta: ModelParams, data, cfg: TrainConfig, callback=None, history=None) -> AdmmState:
    """Run the ADMM loop for ``cfg.epochs`` epochs from ``theta``.

    ``callback(state, info)`` runs after every step.  If ``history`` is a list,
    one record per epoch is appended.
    """
    x_all, y_all = _as_arrays(data)
    state = init_admm(theta)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        lr, atk = cfg.lr_at(epoch), cfg.attack_at(epoch)
        infos = []
        for idx in minibatches(len(x_all), cfg.batch_size, rng):
            info = admm_step(state, x_all[idx], y_all[idx], cfg, lr, attack_cfg=atk)
            infos.append(info)
            if callback is not None:
                callback(state, info)
        record = epoch_record(state, epoch, infos, x_all, y_all)
        log.info("epoch %(epoch)d adv loss %(adv_loss).4f residual %(residual).4g nnz %(nnz)d", record)
        if history is not None:
            history.append(record)
    return state


def epoch_record(state, epoch, infos, x_all, y_all, n_clean=512):
    x, y = x_all[:n_clean], y_all[:n_clean]
    clean = float(T.softmax_cross_entropy(forward(state.theta, x), y).data) if len(x) else float("nan")
    return {
        "epoch": epoch,
        "step": state.t,
        "clean_loss": clean,
        "adv_loss": float(np.mean([i["loss"] for i in infos])) if infos else float("nan"),
        "residual": primal_residual(state),
        "nnz": state.theta.total_nnz(),
        "distinct": [count_distinct_nonzero(m) for _, _, m in state.theta_prime.matrices()],
    }


def finalize(state_or_theta, comp: CompressionConfig, seed=0) -> ModelParams:
    """Sparsify ``theta`` to the budget, then quantize each matrix with ZeroKmeans."""
    theta = state_or_theta.theta if isinstance(state_or_theta, AdmmState) else state_or_theta
    out = project_topk_global(theta, comp.k)
    if comp.b < 32:
        out = zero_kmeans_model(out, comp.b, comp.zk_max_iters, comp.zk_tol, seed=seed, n_init=comp.zk_n_init)
    return out
