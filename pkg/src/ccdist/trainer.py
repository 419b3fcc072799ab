"""Teacher (PGD, SGD with a cyclic learning rate) and student (certified, Adam) training loops."""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, eval_attack_config, pgd, student_attack_config, teacher_attack_config
from .bounds import PerturbationSpec, logit_diff_lower_bound
from .data import Dataset, batches, num_batches
from .losses import LossConfig, TeacherSnapshot, cross_entropy, l1_penalty, training_loss
from .network import Network, init
from .tensor import add, backward, mul, no_grad

OPTIMIZERS = ("sgd_momentum_cyclic", "adam")
METRIC_FIELDS = ("epoch", "eps", "lr", "train_loss", "std_acc", "adv_acc", "cert_acc")

TEACHER_PEAK_LR = 0.2
TEACHER_MOMENTUM = 0.9
STUDENT_LR = 5e-4
LR_DECAY_FACTOR = 0.2


@dataclass
class TrainSchedule:
    total_epochs: int = 20
    warmup_epochs: int = 1
    rampup_epochs: int = 5
    lr: float = STUDENT_LR
    lr_decay_milestones: tuple = ()
    lr_decay_factor: float = LR_DECAY_FACTOR
    batch_size: int = 128
    grad_clip_norm: float = 10.0
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_milestones = tuple(int(m) for m in self.lr_decay_milestones)
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.warmup_epochs < 0 or self.rampup_epochs < 0:
            raise ValueError("warmup_epochs and rampup_epochs must be non-negative")
        if self.warmup_epochs + self.rampup_epochs > self.total_epochs:
            raise ValueError(
                f"warmup ({self.warmup_epochs}) + rampup ({self.rampup_epochs}) exceeds total epochs ({self.total_epochs})"
            )
        ms = self.lr_decay_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_decay_milestones must be strictly increasing, got {ms}")
        if ms and ms[0] <= self.warmup_epochs + self.rampup_epochs:
            raise ValueError(f"lr_decay_milestones must come after warmup + rampup, got {ms}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.grad_clip_norm <= 0:
            raise ValueError("lr, batch_size and grad_clip_norm must be positive")


def teacher_schedule(total_epochs: int = 10, seed: int = 0, batch_size: int = 128) -> TrainSchedule:
    return TrainSchedule(total_epochs, 0, 0, TEACHER_PEAK_LR, (), LR_DECAY_FACTOR, batch_size, 10.0,
                         "sgd_momentum_cyclic", seed)


def student_schedule(total_epochs: int = 20, rampup_epochs: int = 5, milestones=(), seed: int = 0,
                     batch_size: int = 128) -> TrainSchedule:
    return TrainSchedule(total_epochs, 1, rampup_epochs, STUDENT_LR, tuple(milestones), LR_DECAY_FACTOR,
                         batch_size, 10.0, "adam", seed)


@dataclass(frozen=True)
class EpsSchedule:
    """Zero during warm-up, linear ramp to the target, then constant.

    ``t`` is a fractional epoch (``epoch + step / steps_per_epoch``).
    """

    target: float
    warmup_epochs: float = 1
    rampup_epochs: float = 0

    def at(self, t: float) -> float:
        if t < self.warmup_epochs:
            return 0.0
        if self.rampup_epochs == 0:
            return float(self.target)
        frac = min(max((t - self.warmup_epochs) / self.rampup_epochs, 0.0), 1.0)
        return float(self.target) if frac == 1.0 else float(self.target) * frac


def step_lr(schedule: TrainSchedule, epoch: int, step: int, steps_per_epoch: int) -> float:
    if schedule.optimizer == "sgd_momentum_cyclic":
        total = schedule.total_epochs * steps_per_epoch
        pos = (epoch * steps_per_epoch + step + 0.5) / total
        return float(np.interp(pos, [0.0, 0.5, 1.0], [0.0, schedule.lr, 0.0]))
    passed = sum(1 for m in schedule.lr_decay_milestones if epoch >= m)
    return schedule.lr * schedule.lr_decay_factor**passed


# ---------------------------------------------------------------- optimisation


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm: float):
    """Rescale so the global l2 norm is at most ``max_norm``; returns ``(grads, norm_before)``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class SGDMomentum:
    def __init__(self, params, momentum: float = TEACHER_MOMENTUM):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads, lr: float):
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p.data -= lr * v


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params):
    return SGDMomentum(params) if name == "sgd_momentum_cyclic" else Adam(params)


def step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, step]))


# ---------------------------------------------------------------- metrics


class MetricsLog:
    """Collects per-epoch rows, echoes them to a stream and optionally to CSV."""

    def __init__(self, path=None, stream=sys.stdout):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        self.stream = stream
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def add(self, row: dict):
        self.rows.append(row)
        values = [row[k] if k == "epoch" else f"{row[k]:.6g}" for k in METRIC_FIELDS]
        if self.stream is not None:
            print(",".join(str(v) for v in values), file=self.stream, flush=True)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow(values)


class _Running:
    def __init__(self):
        self.n = 0
        self.loss = 0.0
        self.std = 0
        self.adv = 0
        self.cert = 0

    def update(self, net, x, y, x_adv, eps, domain, loss_value):
        with no_grad():
            std, adv, cert = _correct(net, x, y, x_adv, eps, domain)
        self.n += len(y)
        self.loss += loss_value * len(y)
        self.std += int(std.sum())
        self.adv += int(adv.sum())
        self.cert += int(cert.sum())

    def row(self, epoch, eps, lr):
        n = max(self.n, 1)
        return {"epoch": epoch, "eps": eps, "lr": lr, "train_loss": self.loss / n,
                "std_acc": self.std / n, "adv_acc": self.adv / n, "cert_acc": self.cert / n}


def _correct(net: Network, x, y, x_adv, eps, domain):
    """Per-sample clean, adversarial and IBP-certified correctness, nested by construction."""
    std = np.argmax(net(x).data, -1) == y
    adv = std & (np.argmax(net(x_adv).data, -1) == y)
    z = logit_diff_lower_bound(net, PerturbationSpec(x, eps, domain), y).data
    z = z.copy()
    z[np.arange(len(y)), y] = np.inf
    cert = adv & np.all(z > 0, axis=-1)
    return std, adv, cert


# ---------------------------------------------------------------- loops


def _apply(net, optimizer, loss, schedule, lr):
    params = net.parameters()
    grads = backward(loss, params)
    grads, _ = clip_gradients(grads, schedule.grad_clip_norm)
    optimizer.step(grads, lr)


def _as_network(net_spec, seed) -> Network:
    return net_spec.copy() if isinstance(net_spec, Network) else init(net_spec, seed)


def train_teacher(data: Dataset, net_spec, eps: float, schedule: TrainSchedule, l1_coeff: float = 0.0,
                  attack_cfg: AttackConfig | None = None, domain=(0.0, 1.0), metrics_path=None,
                  stream=sys.stdout, metrics: list | None = None) -> Network:
    """PGD adversarial training; ``eps == 0`` gives standard training."""
    if schedule.optimizer != "sgd_momentum_cyclic":
        raise ValueError("teacher training uses the sgd_momentum_cyclic optimizer")
    attack_cfg = attack_cfg or teacher_attack_config(schedule.seed)
    net = _as_network(net_spec, schedule.seed)
    optimizer = make_optimizer(schedule.optimizer, net.parameters())
    eps_sched = EpsSchedule(eps, schedule.warmup_epochs, schedule.rampup_epochs)
    log = MetricsLog(metrics_path, stream)
    steps = num_batches(len(data), schedule.batch_size)
    for epoch in range(schedule.total_epochs):
        run = _Running()
        for step, (x, y) in enumerate(batches(data, schedule.batch_size, schedule.seed, epoch)):
            lr = step_lr(schedule, epoch, step, steps)
            eps_t = eps_sched.at(epoch + step / steps)
            spec = PerturbationSpec(x, eps_t, domain)
            x_adv = pgd(net, spec, y, attack_cfg, rng=step_rng(schedule.seed, epoch, step))
            loss = cross_entropy(net(x_adv), y)
            if l1_coeff > 0:
                loss = add(loss, mul(l1_penalty(net), l1_coeff))
            run.update(net, x, y, x_adv, eps_t, domain, loss.item())
            _apply(net, optimizer, loss, schedule, lr)
        log.add(run.row(epoch + 1, eps_t, lr))
    if metrics is not None:
        metrics.extend(log.rows)
    return net


def train_student(data: Dataset, net_spec, teacher, eps: float, loss_cfg: LossConfig, schedule: TrainSchedule,
                  attack_cfg: AttackConfig | None = None, domain=(0.0, 1.0), metrics_path=None,
                  stream=sys.stdout, metrics: list | None = None) -> Network:
    """Warm-up on clean cross-entropy, then the configured certified objective under the ramped eps."""
    if schedule.optimizer != "adam":
        raise ValueError("student training uses the adam optimizer")
    net = _as_network(net_spec, schedule.seed)
    snapshot = None
    if loss_cfg.needs_teacher:
        if teacher is None:
            raise ValueError(f"loss variant {loss_cfg.variant!r} needs a teacher network")
        snapshot = teacher if isinstance(teacher, TeacherSnapshot) else TeacherSnapshot(teacher, loss_cfg.feature_tap)
        snapshot.check_compatible(net, loss_cfg.feature_tap)
    attack_cfg = attack_cfg or student_attack_config(schedule.seed)
    optimizer = make_optimizer(schedule.optimizer, net.parameters())
    eps_sched = EpsSchedule(eps, schedule.warmup_epochs, schedule.rampup_epochs)
    log = MetricsLog(metrics_path, stream)
    steps = num_batches(len(data), schedule.batch_size)
    for epoch in range(schedule.total_epochs):
        run = _Running()
        for step, (x, y) in enumerate(batches(data, schedule.batch_size, schedule.seed, epoch)):
            lr = step_lr(schedule, epoch, step, steps)
            if epoch < schedule.warmup_epochs:
                eps_t = 0.0
                x_adv = x
                loss = cross_entropy(net(x), y)
            else:
                eps_t = eps_sched.at(epoch + step / steps)
                spec = PerturbationSpec(x, eps_t, domain)
                x_adv = pgd(net, spec, y, attack_cfg, rng=step_rng(schedule.seed, epoch, step))
                loss = training_loss(net, snapshot, x, y, spec, loss_cfg, x_adv=x_adv)
            run.update(net, x, y, x_adv, eps_t, domain, loss.item())
            _apply(net, optimizer, loss, schedule, lr)
        log.add(run.row(epoch + 1, eps_t, lr))
    if metrics is not None:
        metrics.extend(log.rows)
    return net


@dataclass
class EvalResult:
    standard_acc: float
    adv_acc: float
    ibp_certified_acc: float
    n: int = 0
    per_sample: dict = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict:
        return {"standard_acc": self.standard_acc, "adv_acc": self.adv_acc,
                "ibp_certified_acc": self.ibp_certified_acc, "n": self.n}


def evaluate(net: Network, data: Dataset, eps: float, attack_cfg: AttackConfig | None = None,
             domain=(0.0, 1.0), batch_size: int = 1000) -> EvalResult:
    """Clean accuracy, PGD accuracy and IBP-certified accuracy at ``eps``.

    A sample only counts as robust if it is also correct on clean data, and only
    counts as certified if PGD also fails on it, so the three figures are nested.
    """
    attack_cfg = attack_cfg or eval_attack_config()
    frozen = net.detached()
    flags = {"std": [], "adv": [], "cert": []}
    for i, (x, y) in enumerate(batches(data, batch_size)):
        spec = PerturbationSpec(x, eps, domain)
        x_adv = pgd(frozen, spec, y, attack_cfg, rng=step_rng(attack_cfg.seed, 0, i))
        with no_grad():
            std, adv, cert = _correct(frozen, x, y, x_adv, eps, domain)
        flags["std"].append(std)
        flags["adv"].append(adv)
        flags["cert"].append(cert)
    per = {k: np.concatenate(v) if v else np.zeros(0, bool) for k, v in flags.items()}
    n = len(data)
    frac = (lambda a: float(a.mean()) if n else 0.0)
    return EvalResult(frac(per["std"]), frac(per["adv"]), frac(per["cert"]), n, per)
