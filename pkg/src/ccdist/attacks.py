"""Sign-gradient PGD in the l-infinity ball."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import PerturbationSpec
from .network import Network
from .tensor import Tensor, backward, gather, log_sum_exp, tsum


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 1
    step_size_factor: float = 10.0  # step size as a multiple of the (effective) radius
    random_init: bool = True
    radius_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size_factor <= 0:
            raise ValueError(f"step_size_factor must be positive, got {self.step_size_factor}")
        if self.radius_multiplier < 1:
            raise ValueError(f"radius_multiplier must be >= 1, got {self.radius_multiplier}")


def student_attack_config(seed: int = 0) -> AttackConfig:
    """Single step with uniform random start and step 10 eps."""
    return AttackConfig(steps=1, step_size_factor=10.0, random_init=True, seed=seed)


def teacher_attack_config(seed: int = 0) -> AttackConfig:
    """Ten steps of size 0.25 eps, used for adversarial (teacher) training."""
    return AttackConfig(steps=10, step_size_factor=0.25, random_init=True, seed=seed)


def eval_attack_config(seed: int = 0) -> AttackConfig:
    """PGD-40 with step 0.25 eps for empirical-robustness evaluation."""
    return AttackConfig(steps=40, step_size_factor=0.25, random_init=True, seed=seed)


def summed_cross_entropy(net: Network, x: Tensor, y) -> Tensor:
    logits = net(x)
    return tsum(log_sum_exp(logits, -1) - gather(logits, y))


def pgd(net: Network, spec: PerturbationSpec, y, cfg: AttackConfig, loss_fn=None, rng=None) -> np.ndarray:
    """Maximise ``loss_fn(net, x, y)`` over the perturbation box.

    Iterates ``x <- proj(x + eta * sign(grad))`` inside the box of radius
    ``eps * radius_multiplier``; the returned point is projected into the
    ``eps`` box (and the input domain), so it is always feasible.
    ``loss_fn`` defaults to cross-entropy summed over the batch.
    """
    loss_fn = loss_fn or summed_cross_entropy
    x = spec.center
    if spec.eps == 0:
        return x.copy()
    radius = spec.eps * cfg.radius_multiplier
    lo_wide, hi_wide = spec.box(radius)
    lo, hi = spec.box()
    eta = cfg.step_size_factor * radius
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x_adv = rng.uniform(lo_wide, hi_wide) if cfg.random_init else x.copy()
    frozen = net.detached()
    for _ in range(cfg.steps):
        xt = Tensor(x_adv, requires_grad=True)
        (g,) = backward(loss_fn(frozen, xt, y), [xt])
        x_adv = np.clip(x_adv + eta * np.sign(g), lo_wide, hi_wide)
    return np.clip(x_adv, lo, hi)
