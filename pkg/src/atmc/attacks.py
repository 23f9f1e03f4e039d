"""White-box attacks: PGD and FGSM inside an l-inf ball, and penalty-based WRM.

Every attack takes a *model*, which is either a :class:`~atmc.model.ModelParams`
or any callable ``grad_fn(x, y) -> dloss/dx``.  Attacks are deterministic.
Budgets here are in normalized pixel units; :meth:`AttackConfig.from_255`
converts from the 0-255 scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .model import ModelParams, forward, layer_weights

FAMILIES = ("pgd", "fgsm", "wrm", "none")


@dataclass(frozen=True)
class AttackConfig:
    family: str = "none"
    delta: float = 0.0
    n_steps: int = 1
    alpha: float | None = None
    wrm_gamma: float = 1.3
    pixel_min: float = 0.0
    pixel_max: float = 1.0
    step: str = "sign"  # sign | raw, for pgd
    alpha_rule: str = "kurakin"  # kurakin: min(D + 4/255, 1.25 D) / n;  simple: 1.25 D / n

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.family in ("pgd", "wrm") and self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.step not in ("sign", "raw"):
            raise ValueError(f"unknown step rule {self.step!r}")
        if self.alpha_rule not in ("kurakin", "simple"):
            raise ValueError(f"unknown alpha rule {self.alpha_rule!r}")

    @classmethod
    def from_255(cls, family, delta, n_steps=1, **kw):
        """Build a config whose budget is given on the 0-255 pixel scale."""
        return cls(family=family, delta=delta / 255.0, n_steps=n_steps, **kw)

    @property
    def step_size(self):
        if self.alpha is not None:
            return self.alpha
        if self.family == "wrm":
            return min(0.1 * self.delta / self.n_steps, 1.0 / self.wrm_gamma)
        if self.alpha_rule == "simple":
            return 1.25 * self.delta / self.n_steps
        return min(self.delta + 4.0 / 255.0, 1.25 * self.delta) / self.n_steps

    def describe(self):
        if self.family == "none":
            return "none"
        d = f"{self.family}(delta={self.delta * 255:g}/255,n={self.n_steps}"
        if self.family == "wrm":
            d += f",gamma={self.wrm_gamma:g}"
        return d + ")"

    def with_delta(self, delta):
        return replace(self, delta=delta)


NO_ATTACK = AttackConfig()


def input_grad_fn(model: ModelParams):
    """``grad_fn(x, y)`` returning d(summed cross-entropy)/dx for a fixed model.

    The loss is summed rather than averaged so each sample's gradient does not
    depend on the batch size.
    """
    weights = layer_weights(model, track=False)
    dtype = model.layers[0].V.dtype

    def grad_fn(x, y):
        xt = T.Tensor(np.asarray(x, dtype=dtype), requires_grad=True)
        loss = T.softmax_cross_entropy(forward(model, xt, weights), y, reduction="sum")
        loss.backward()
        return xt.grad

    return grad_fn


def _grad_fn(model):
    return model if callable(model) else input_grad_fn(model)


def _checked(g, family, step):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"{family} attack: non-finite input gradient at step {step}")
    return g


def project_linf(x_cand, x, delta, pixel_min=0.0, pixel_max=1.0):
    """Clamp into ``[x - delta, x + delta]`` and then into the pixel range."""
    x = np.asarray(x)
    out = np.clip(np.minimum(np.maximum(x_cand, x - delta), x + delta), pixel_min, pixel_max)
    # x + delta can round to a point whose distance from x exceeds delta by an ulp
    for _ in range(4):
        bad = np.abs(out - x) > delta
        if not bad.any():
            break
        out = np.where(bad, np.nextafter(out, x), out)
    return out


def pgd_attack(model, x, y, cfg: AttackConfig):
    if cfg.family != "pgd":
        raise ValueError(f"pgd_attack called with family {cfg.family!r}")
    grad_fn = _grad_fn(model)
    alpha = cfg.step_size
    x_adv = np.array(x, copy=True)
    for i in range(cfg.n_steps):
        g = _checked(grad_fn(x_adv, y), "pgd", i)
        direction = np.sign(g) if cfg.step == "sign" else g
        x_adv = project_linf(x_adv + alpha * direction, x, cfg.delta, cfg.pixel_min, cfg.pixel_max)
    return x_adv


def fgsm_attack(model, x, y, cfg: AttackConfig):
    if cfg.family != "fgsm":
        raise ValueError(f"fgsm_attack called with family {cfg.family!r}")
    g = _checked(_grad_fn(model)(x, y), "fgsm", 0)
    return project_linf(x + cfg.delta * np.sign(g), x, cfg.delta, cfg.pixel_min, cfg.pixel_max)


def wrm_attack(model, x, y, cfg: AttackConfig):
    """Gradient ascent on ``f(x') - gamma/2 * ||x' - x||^2`` with raw gradient steps."""
    if cfg.family != "wrm":
        raise ValueError(f"wrm_attack called with family {cfg.family!r}")
    grad_fn = _grad_fn(model)
    alpha, gamma = cfg.step_size, cfg.wrm_gamma
    x0 = np.asarray(x)
    x_adv = np.array(x, copy=True)
    for i in range(cfg.n_steps):
        g = _checked(grad_fn(x_adv, y), "wrm", i) - gamma * (x_adv - x0)
        x_adv = x_adv + alpha * g
    return np.clip(x_adv, cfg.pixel_min, cfg.pixel_max)


def attack(model, x, y, cfg: AttackConfig):
    """Dispatch on ``cfg.family``; ``none`` returns ``x`` unchanged."""
    if cfg.family == "none":
        return np.asarray(x)
    if cfg.family == "pgd":
        return pgd_attack(model, x, y, cfg)
    if cfg.family == "fgsm":
        return fgsm_attack(model, x, y, cfg)
    return wrm_attack(model, x, y, cfg)
