"""Robust training objectives: adversarial, IBP, their convex combinations, and
feature-space distillation coupled to them.

All batched losses average over the batch; a single (unbatched) sample gives
the per-sample value. Labels are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, pgd, student_attack_config
from .bounds import BoundsPair, PerturbationSpec, diff_head_lower, ibp_forward, logit_diff_lower_bound
from .network import Network, logit_diffs_from_logits
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    gather,
    log_softmax,
    log_sum_exp,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    softmax,
    square,
    sub,
    tsum,
)

VARIANTS = (
    "adversarial",
    "ibp",
    "cc_ibp",
    "mtl_ibp",
    "cc_dist",
    "cc_dist0",
    "cc_dist1",
    "mtl_ibp_dist",
    "logit_kl",
)
FEATURE_DISTILL_VARIANTS = ("cc_dist", "cc_dist0", "cc_dist1", "mtl_ibp_dist")
TEACHER_VARIANTS = FEATURE_DISTILL_VARIANTS + ("logit_kl",)


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float | None = None  # None means 5 / feature width
    variant: str = "cc_dist"
    temperature: float = 20.0
    l1_coeff: float = 0.0
    feature_tap: int | None = None  # None: activations before the last affine layer

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.l1_coeff < 0:
            raise ValueError(f"l1_coeff must be non-negative, got {self.l1_coeff}")

    def beta_for(self, width: int) -> float:
        return 5.0 / width if self.beta is None else float(self.beta)

    @property
    def needs_teacher(self) -> bool:
        return self.variant in TEACHER_VARIANTS and (self.beta is None or self.beta > 0)


class TeacherSnapshot:
    """A frozen copy of a teacher network; its outputs never carry gradients."""

    def __init__(self, net: Network, tap: int | None = None):
        self.net = net.frozen()
        self.tap = tap

    def check_compatible(self, student: Network, tap: int | None = None):
        tap = self.tap if tap is None else tap
        ws, wt = student.feature_dim(tap), self.net.feature_dim(tap)
        if ws != wt:
            raise ValueError(f"teacher feature dimension {wt} differs from student feature dimension {ws}")
        if student.input_dim != self.net.input_dim:
            raise ValueError(f"teacher input dim {self.net.input_dim} differs from student {student.input_dim}")

    def features(self, x, tap: int | None = None) -> Tensor:
        tap = self.tap if tap is None else tap
        with no_grad():
            return self.net.features(np.asarray(x.data if isinstance(x, Tensor) else x), tap).detach()

    def logits(self, x) -> Tensor:
        with no_grad():
            return self.net(np.asarray(x.data if isinstance(x, Tensor) else x)).detach()


def _teacher(teacher) -> TeacherSnapshot:
    return teacher if isinstance(teacher, TeacherSnapshot) else TeacherSnapshot(teacher)


def _batch_mean(t: Tensor) -> Tensor:
    return t if t.ndim == 0 else mean(t)


# ---------------------------------------------------------------- classification terms


def cross_entropy(logits, y) -> Tensor:
    logits = as_tensor(logits)
    return _batch_mean(sub(log_sum_exp(logits, -1), gather(logits, y)))


def xent_logit_diffs(z, y) -> Tensor:
    """Cross-entropy evaluated on ``-z`` with target ``y``; needs ``z[y] == 0``."""
    z = as_tensor(z)
    y_arr = np.asarray(y, dtype=np.int64)
    at_y = np.take_along_axis(z.data, np.expand_dims(y_arr, -1), -1)
    if np.any(at_y != 0.0):
        raise ValueError("xent_logit_diffs: the ground-truth entry of the logit differences must be 0")
    return cross_entropy(neg(z), y)


def adv_loss(net: Network, x_adv, y) -> Tensor:
    return xent_logit_diffs(logit_diffs_from_logits(net(x_adv), y), y)


def ibp_loss(net: Network, spec: PerturbationSpec, y, layer_bounds=None) -> Tensor:
    return xent_logit_diffs(logit_diff_lower_bound(net, spec, y, layer_bounds), y)


def cc_logit_diffs(z_adv: Tensor, z_lower: Tensor, alpha: float) -> Tensor:
    return add(mul(z_adv, 1.0 - alpha), mul(z_lower, alpha))


def cc_ibp_loss(net: Network, x_adv, spec: PerturbationSpec, y, alpha: float) -> Tensor:
    z_adv = logit_diffs_from_logits(net(x_adv), y)
    z_lower = logit_diff_lower_bound(net, spec, y)
    return xent_logit_diffs(cc_logit_diffs(z_adv, z_lower, alpha), y)


def mtl_ibp_loss(net: Network, x_adv, spec: PerturbationSpec, y, alpha: float) -> Tensor:
    return add(mul(adv_loss(net, x_adv, y), 1.0 - alpha), mul(ibp_loss(net, spec, y), alpha))


# ---------------------------------------------------------------- feature distillation


def _check_dims(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: student features {a.shape} vs teacher features {b.shape}")


def distill_adv(features_adv, teacher_features) -> Tensor:
    """Squared l2 distance between adversarial student features and clean teacher features."""
    a, t = as_tensor(features_adv), as_tensor(teacher_features)
    _check_dims(a, t, "distill_adv")
    return _batch_mean(tsum(square(sub(a, t)), -1))


def distill_upper(feature_bounds: BoundsPair, teacher_features) -> Tensor:
    """Sum over coordinates of the larger squared endpoint distance.

    Upper-bounds ``max ||h(x') - h_t(x)||^2`` over the box; ties between the
    two endpoints send the gradient to the lower one.
    """
    t = as_tensor(teacher_features)
    _check_dims(feature_bounds.lower, t, "distill_upper")
    low = square(sub(feature_bounds.lower, t))
    up = square(sub(feature_bounds.upper, t))
    return _batch_mean(tsum(maximum(low, up), -1))


def cc_feature_combos(features_adv, feature_bounds: BoundsPair, alpha: float) -> BoundsPair:
    """Interpolate the adversarial features towards each IBP feature bound."""
    a = as_tensor(features_adv)
    lo, hi = feature_bounds.lower, feature_bounds.upper
    if a.shape != lo.shape:
        raise ValueError(f"cc_feature_combos: features {a.shape} vs bounds {lo.shape}")
    tol = 1e-9 * (1.0 + np.abs(a.data))
    if np.any(a.data < lo.data - tol) or np.any(a.data > hi.data + tol):
        raise ValueError("cc_feature_combos: adversarial features fall outside their IBP bounds")
    keep = 1.0 - alpha
    return BoundsPair(add(mul(a, keep), mul(lo, alpha)), add(mul(a, keep), mul(hi, alpha)))


def cc_distill(features_adv, feature_bounds: BoundsPair, teacher_features, alpha: float) -> Tensor:
    return distill_upper(cc_feature_combos(features_adv, feature_bounds, alpha), teacher_features)


def l1_penalty(net: Network) -> Tensor:
    total = None
    for p in net.parameters():
        term = tsum(absolute(p))
        total = term if total is None else add(total, term)
    return total


def kl_divergence_t(student_logits, teacher_logits, temperature: float) -> Tensor:
    """KL(softmax(teacher/T) || softmax(student/T)), batch-averaged."""
    s, t = as_tensor(student_logits), as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ValueError(f"kl_divergence_t: student {s.shape} vs teacher {t.shape}")
    q = softmax(t, temperature)
    diff = sub(log_softmax(t, temperature), log_softmax(s, temperature))
    return _batch_mean(tsum(mul(q, diff), -1))


def kd_loss(net: Network, teacher, x, y, lam: float, temperature: float = 20.0) -> Tensor:
    teacher = _teacher(teacher)
    logits = net(x)
    kl = kl_divergence_t(logits, teacher.logits(x), temperature)
    return add(cross_entropy(logits, y), mul(kl, temperature**2 * lam))


def fkd_loss(net: Network, teacher, x, y, lam: float, tap: int | None = None) -> Tensor:
    teacher = _teacher(teacher)
    logits, feats = net.forward_with_features(x, tap)
    t_feats = teacher.features(x, tap)
    return add(cross_entropy(logits, y), mul(distill_adv(feats, t_feats), lam))


# ---------------------------------------------------------------- combined objectives


class _Pieces:
    """Shared intermediate quantities for one batch, computed on demand."""

    def __init__(self, net, x_adv, spec, y, tap):
        self.net, self.x_adv, self.spec, self.y, self.tap = net, x_adv, spec, y, tap
        self._adv = None
        self._ibp = None

    @property
    def adv(self):
        if self._adv is None:
            logits, feats = self.net.forward_with_features(self.x_adv, self.tap)
            self._adv = (logit_diffs_from_logits(logits, self.y), feats)
        return self._adv

    @property
    def ibp(self):
        if self._ibp is None:
            layer_bounds, feat_bounds = ibp_forward(self.net, self.spec, self.tap)
            z_lower = logit_diff_lower_bound(self.net, self.spec, self.y, layer_bounds)
            self._ibp = (z_lower, feat_bounds)
        return self._ibp

    def cc_logits(self, alpha):
        return cc_logit_diffs(self.adv[0], self.ibp[0], alpha)


def _resolve_x_adv(net, spec, y, x_adv, attack_cfg, rng):
    if x_adv is not None:
        return np.asarray(x_adv.data if isinstance(x_adv, Tensor) else x_adv)
    return pgd(net, spec, y, attack_cfg or student_attack_config(), rng=rng)


def training_loss(net: Network, teacher, x, y, spec: PerturbationSpec, cfg: LossConfig,
                  x_adv=None, attack_cfg: AttackConfig | None = None, rng=None) -> Tensor:
    """The configured objective for one batch, including the l1 term.

    ``x_adv`` is computed by PGD on the student when not supplied. The same
    ``alpha`` drives the classification and the distillation terms.
    """
    variant, alpha = cfg.variant, cfg.alpha
    x_adv = _resolve_x_adv(net, spec, y, x_adv, attack_cfg, rng)
    p = _Pieces(net, x_adv, spec, y, cfg.feature_tap)

    if variant == "adversarial":
        loss = xent_logit_diffs(p.adv[0], y)
    elif variant == "ibp":
        loss = xent_logit_diffs(p.ibp[0], y)
    elif variant in ("cc_ibp", "cc_dist", "cc_dist0", "cc_dist1", "logit_kl"):
        loss = xent_logit_diffs(p.cc_logits(alpha), y)
    else:  # mtl_ibp, mtl_ibp_dist
        loss = add(mul(xent_logit_diffs(p.adv[0], y), 1.0 - alpha), mul(xent_logit_diffs(p.ibp[0], y), alpha))

    beta = cfg.beta_for(net.feature_dim(cfg.feature_tap))
    if variant in FEATURE_DISTILL_VARIANTS and beta > 0:
        if teacher is None:
            raise ValueError(f"variant {variant!r} needs a teacher")
        teacher = _teacher(teacher)
        t_feats = teacher.features(spec.center, cfg.feature_tap)
        distill_alpha = {"cc_dist": alpha, "cc_dist0": 0.0, "cc_dist1": 1.0, "mtl_ibp_dist": 1.0}[variant]
        if distill_alpha == 0.0:
            dist = distill_adv(p.adv[1], t_feats)
        elif distill_alpha == 1.0:
            dist = distill_upper(p.ibp[1], t_feats)
        else:
            dist = cc_distill(p.adv[1], p.ibp[1], t_feats, distill_alpha)
        loss = add(loss, mul(dist, beta))
    elif variant == "logit_kl" and beta > 0:
        if teacher is None:
            raise ValueError("variant 'logit_kl' needs a teacher")
        teacher = _teacher(teacher)
        z_teacher = logit_diffs_from_logits(teacher.logits(spec.center), y)
        kl = kl_divergence_t(neg(p.cc_logits(alpha)), neg(z_teacher), cfg.temperature)
        loss = add(loss, mul(kl, cfg.temperature**2 * beta))

    if cfg.l1_coeff > 0:
        loss = add(loss, mul(l1_penalty(net), cfg.l1_coeff))
    return loss


def cc_dist_total(net: Network, teacher, x, y, spec: PerturbationSpec, cfg: LossConfig,
                  x_adv=None, attack_cfg: AttackConfig | None = None, rng=None) -> Tensor:
    """CC-IBP at ``alpha`` plus ``beta`` times the alpha-coupled distillation term, plus l1."""
    if not net.head_is_affine:
        raise ValueError("the coupled objective needs a single affine classification head")
    if cfg.variant != "cc_dist":
        raise ValueError(f"cc_dist_total expects variant 'cc_dist', got {cfg.variant!r}")
    return training_loss(net, teacher, x, y, spec, cfg, x_adv, attack_cfg, rng)


def cc_dist_variant(net: Network, teacher, x, y, spec: PerturbationSpec, cfg: LossConfig, variant: str,
                    x_adv=None, attack_cfg: AttackConfig | None = None, rng=None) -> Tensor:
    """``cc_dist0`` / ``cc_dist1`` / ``mtl_ibp_dist`` with every other setting taken from ``cfg``."""
    if variant not in ("cc_dist0", "cc_dist1", "mtl_ibp_dist", "cc_dist"):
        raise ValueError(f"not a distillation variant: {variant!r}")
    cfg = LossConfig(cfg.alpha, cfg.beta, variant, cfg.temperature, cfg.l1_coeff, cfg.feature_tap)
    return training_loss(net, teacher, x, y, spec, cfg, x_adv, attack_cfg, rng)


def logit_kl_distill(net: Network, teacher, x_adv, spec: PerturbationSpec, y, alpha: float, beta: float,
                     temperature: float = 20.0) -> Tensor:
    """CC-IBP plus a tempered KL between the combined logit differences and the teacher's clean ones."""
    cfg = LossConfig(alpha=alpha, beta=beta, variant="logit_kl", temperature=temperature)
    return training_loss(net, teacher, spec.center, y, spec, cfg, x_adv=x_adv)


def lemma_paths(net: Network, x_adv, spec: PerturbationSpec, y, alpha: float):
    """The combined logit differences computed two ways.

    Returns ``(direct, via_features)``: the convex combination of adversarial
    and IBP logit differences, and the affine head applied to the combined
    feature bounds. They coincide whenever the head is affine.
    """
    if not net.head_is_affine:
        raise ValueError("the identity needs a single affine classification head")
    z_adv = logit_diffs_from_logits(net(x_adv), y)
    layer_bounds, feat_bounds = ibp_forward(net, spec)
    z_lower = logit_diff_lower_bound(net, spec, y, layer_bounds)
    direct = cc_logit_diffs(z_adv, z_lower, alpha)
    combos = cc_feature_combos(net.features(x_adv), feat_bounds, alpha)
    last = net.layers[-1]
    return direct, diff_head_lower(last.weight, last.bias, y, combos)
