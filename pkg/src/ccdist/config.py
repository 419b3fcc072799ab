"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .losses import LossConfig
from .trainer import TrainSchedule, TEACHER_PEAK_LR


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str = "two_moons"  # two_moons | mnist
    data_dir: str = "data/mnist"
    n_train: int = 0  # 0 = all
    n_test: int = 0
    moons_n: int = 1000
    moons_test_n: int = 500
    moons_noise: float = 0.1
    # model
    net_spec: tuple = (2, 32, 32, 2)
    eps: float = 0.05
    # loss
    alpha: float = 0.5
    beta: str = "auto"  # number, "auto" (5/w) or "N/w"
    variant: str = "cc_dist"
    temperature: float = 20.0
    l1_coeff: float = 0.0
    feature_tap: int = -1  # -1 = before the last affine layer
    # schedule
    total_epochs: int = 20
    warmup_epochs: int = 1
    rampup_epochs: int = 5
    lr: float = 5e-4
    lr_decay_milestones: tuple = ()
    lr_decay_factor: float = 0.2
    batch_size: int = 128
    grad_clip_norm: float = 10.0
    optimizer: str = "adam"
    seed: int = 0
    # training attack
    steps: int = 1
    step_size_factor: float = 10.0
    random_init: bool = True
    radius_multiplier: float = 1.0
    # evaluation / verification
    eval_steps: int = 40
    eval_step_size_factor: float = 0.25
    max_nodes: int = 0  # 0 = unlimited
    time_limit: float = 0.0  # seconds, 0 = unlimited
    # outputs
    metrics_csv: str = ""
    verify_csv: str = ""

    _explicit: set = field(default_factory=set, repr=False, compare=False)
    _base_dir: Path = field(default=Path("."), repr=False, compare=False)

    # ---- derived views

    def beta_value(self, width: int) -> float:
        return parse_beta(self.beta, width)

    def loss_config_for(self, width: int) -> LossConfig:
        tap = None if self.feature_tap < 0 else self.feature_tap
        return LossConfig(self.alpha, self.beta_value(width), self.variant, self.temperature, self.l1_coeff, tap)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.total_epochs, self.warmup_epochs, self.rampup_epochs, self.lr,
                             self.lr_decay_milestones, self.lr_decay_factor, self.batch_size,
                             self.grad_clip_norm, self.optimizer, self.seed)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.steps, self.step_size_factor, self.random_init, self.radius_multiplier, self.seed)

    def eval_attack_config(self) -> AttackConfig:
        return AttackConfig(self.eval_steps, self.eval_step_size_factor, True, 1.0, self.seed)

    def as_teacher(self) -> "RunConfig":
        """Teacher defaults (PGD-10 at 0.25 eps, cyclic SGD peaking at 0.2, no warm-up) for unset keys."""
        out = dataclasses.replace(self, _explicit=set(self._explicit), _base_dir=self._base_dir)
        teacher_defaults = {"optimizer": "sgd_momentum_cyclic", "lr": TEACHER_PEAK_LR, "warmup_epochs": 0,
                            "rampup_epochs": 0, "lr_decay_milestones": (), "steps": 10,
                            "step_size_factor": 0.25, "variant": "adversarial", "total_epochs": 10}
        for key, value in teacher_defaults.items():
            if key not in self._explicit:
                setattr(out, key, value)
        return out

    def resolve(self, path: str) -> Path:
        p = Path(path).expanduser()
        return p if p.is_absolute() else (self._base_dir / p).resolve()

    def dump(self) -> str:
        lines = []
        for f in public_fields():
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(e) for e in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def validate(self):
        if self.dataset not in ("two_moons", "mnist"):
            raise ConfigError(f"dataset must be two_moons or mnist, got {self.dataset!r}")
        if len(self.net_spec) < 2:
            raise ConfigError("net_spec needs at least input and output sizes")
        try:
            parse_beta(self.beta, 1)
            self.loss_config_for(max(self.net_spec[-2], 1))
            self.schedule()
            self.attack_config()
            self.eval_attack_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eps < 0:
            raise ConfigError(f"eps must be non-negative, got {self.eps}")
        return self


def public_fields():
    return [f for f in dataclasses.fields(RunConfig) if not f.name.startswith("_")]


_BETA_W = re.compile(r"^\s*([0-9.eE+-]+)\s*/\s*w\s*$")


def parse_beta(text, width: int) -> float:
    """``auto`` -> 5/w, ``N/w`` -> N/w, otherwise a plain non-negative number."""
    s = str(text).strip()
    if s == "auto":
        return 5.0 / width
    m = _BETA_W.match(s)
    try:
        value = float(m.group(1)) / width if m else float(s)
    except ValueError:
        raise ConfigError(f"cannot parse beta {text!r}; use a number, 'auto' or 'N/w'") from None
    if value < 0:
        raise ConfigError(f"beta must be non-negative, got {text!r}")
    return value


def _convert(name: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in re.split(r"[,\s]+", raw) if v)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def apply(cfg: RunConfig, key: str, raw: str, where: str = "") -> None:
    fields = {f.name: f for f in public_fields()}
    if key not in fields:
        raise ConfigError(f"{where}unknown config key {key!r}")
    default = fields[key].default if fields[key].default is not dataclasses.MISSING else getattr(cfg, key)
    setattr(cfg, key, _convert(key, default, raw))
    cfg._explicit.add(key)


def parse_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        apply(cfg, key.strip(), value, f"{source}:{n}: ")
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None, teacher: bool = False) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``.

    ``teacher=True`` swaps in the teacher defaults for keys left unset.
    """
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg._base_dir = p.resolve().parent
        parse_text(p.read_text(encoding="utf-8"), cfg, str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply(cfg, key.strip(), value, "--set: ")
    if seed is not None:
        cfg.seed = int(seed)
        cfg._explicit.add("seed")
    if teacher:
        cfg = cfg.as_teacher()
    return cfg.validate()
