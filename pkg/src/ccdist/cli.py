"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import network as nn
from .bounds import PerturbationSpec
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, load_mnist, two_moons
from .losses import TEACHER_VARIANTS
from .trainer import evaluate, train_student, train_teacher
from .verifier import append_csv, verify_complete, verify_incomplete

DOMAIN = (0.0, 1.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccdist", description="Certified training with feature distillation, attacks and verification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=False, config=True):
        if model:
            sp.add_argument("--model", required=True, help="checkpoint path")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
            sp.add_argument("--seed", type=int, help="override the seed everywhere")

    sp = sub.add_parser("train-teacher", help="PGD-train a teacher network")
    common(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train a certified student")
    common(sp)
    sp.add_argument("--teacher", help="teacher checkpoint (needed by distillation variants)")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("attack", help="PGD accuracy of a checkpoint")
    common(sp, model=True)

    sp = sub.add_parser("verify", help="verify evaluation samples one by one")
    common(sp, model=True)
    sp.add_argument("--mode", choices=("ibp", "bab"), default="ibp")
    sp.add_argument("--limit", type=int, default=0, help="only the first N evaluation samples (0 = all)")

    sp = sub.add_parser("eval", help="standard / PGD / IBP-certified accuracy")
    common(sp, model=True)

    sp = sub.add_parser("inspect", help="print a checkpoint's layer shapes")
    common(sp, model=True, config=False)
    return p


# ---------------------------------------------------------------- helpers


def load_data(cfg: RunConfig, split: str) -> Dataset:
    if cfg.dataset == "two_moons":
        if split == "train":
            return two_moons(cfg.moons_n, cfg.moons_noise, cfg.seed)
        return two_moons(cfg.moons_test_n, cfg.moons_noise, cfg.seed + 1_000_003)
    data = load_mnist(cfg.resolve(cfg.data_dir), split)
    limit = cfg.n_train if split == "train" else cfg.n_test
    return data.head(limit) if limit > 0 else data


def _check_data_paths(cfg: RunConfig):
    if cfg.dataset == "mnist":
        d = cfg.resolve(cfg.data_dir)
        if not d.is_dir():
            raise ConfigError(f"data_dir does not exist: {d}")


def _echo_config(cfg: RunConfig, target: Path):
    target.parent.mkdir(parents=True, exist_ok=True)
    Path(str(target) + ".config").write_text(cfg.dump(), encoding="utf-8")


def _load_model(path) -> nn.Network:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"model file not found: {p}")
    return nn.load(p)


def _config(args, teacher: bool = False) -> RunConfig:
    return load_config(args.config, args.set, args.seed, teacher)


# ---------------------------------------------------------------- commands


def cmd_train_teacher(args) -> int:
    cfg = _config(args, teacher=True)
    out = Path(args.out).resolve()
    metrics = cfg.resolve(cfg.metrics_csv) if cfg.metrics_csv else Path(str(out) + ".metrics.csv")
    _check_data_paths(cfg)
    _echo_config(cfg, out)
    data = load_data(cfg, "train")
    net = train_teacher(data, cfg.net_spec, cfg.eps, cfg.schedule(), cfg.l1_coeff, cfg.attack_config(),
                        DOMAIN, metrics)
    nn.save(net, out)
    print(f"saved teacher to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out).resolve()
    metrics = cfg.resolve(cfg.metrics_csv) if cfg.metrics_csv else Path(str(out) + ".metrics.csv")
    loss_cfg = cfg.loss_config_for(cfg.net_spec[-2])
    teacher = None
    if loss_cfg.variant in TEACHER_VARIANTS and loss_cfg.beta > 0:
        if not args.teacher:
            raise ConfigError(f"variant {loss_cfg.variant!r} needs a teacher: pass --teacher PATH")
        teacher = _load_model(args.teacher)
    _check_data_paths(cfg)
    _echo_config(cfg, out)
    data = load_data(cfg, "train")
    net = train_student(data, cfg.net_spec, teacher, cfg.eps, loss_cfg, cfg.schedule(), cfg.attack_config(),
                        DOMAIN, metrics)
    nn.save(net, out)
    print(f"saved student to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = _load_model(args.model)
    _check_data_paths(cfg)
    res = evaluate(net, load_data(cfg, "test"), cfg.eps, cfg.eval_attack_config(), DOMAIN)
    print(json.dumps({"eps": cfg.eps, **res.as_dict()}))
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    net = _load_model(args.model)
    _check_data_paths(cfg)
    res = evaluate(net, load_data(cfg, "test"), cfg.eps, cfg.eval_attack_config(), DOMAIN)
    print(json.dumps({"eps": cfg.eps, "standard_acc": res.standard_acc, "adv_acc": res.adv_acc, "n": res.n}))
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    if args.limit < 0:
        raise ConfigError("--limit must be >= 0")
    net = _load_model(args.model)
    _check_data_paths(cfg)
    out = cfg.resolve(cfg.verify_csv) if cfg.verify_csv else Path(str(Path(args.model).resolve()) + f".verify-{args.mode}.csv")
    _echo_config(cfg, out)
    data = load_data(cfg, "test")
    if args.limit:
        data = data.head(args.limit)
    counts = {"certified": 0, "falsified": 0, "unknown": 0}
    max_nodes = cfg.max_nodes or None
    time_limit = cfg.time_limit or None
    print("idx,status,min_bound,nodes,time_ms")
    for i in range(len(data)):
        spec = PerturbationSpec(data.inputs[i], cfg.eps, DOMAIN)
        y = int(data.labels[i])
        if args.mode == "ibp":
            res = verify_incomplete(net, spec, y)
        else:
            res = verify_complete(net, spec, y, max_nodes, time_limit, cfg.eval_attack_config())
        counts[res.status] += 1
        append_csv(out, i, res)
        print(f"{i},{res.status},{res.min_bound:.9g},{res.nodes_explored},{res.wall_time * 1000:.3f}")
    print(json.dumps({"mode": args.mode, "n": len(data), **counts}))
    return 0


def cmd_inspect(args) -> int:
    net = _load_model(args.model)
    dims = [net.input_dim] + [layer.out_features for layer in net.dense_layers()]
    print(f"net_spec: {','.join(map(str, dims))}")
    for i, layer in enumerate(net.dense_layers()):
        print(f"dense {i}: {layer.out_features}x{layer.in_features}")
    print(f"feature_cut: {net.feature_cut}")
    print(f"feature_dim: {net.feature_dim()}")
    print(f"classes: {net.classes}")
    print(f"parameters: {net.parameter_count()}")
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train": cmd_train,
    "attack": cmd_attack,
    "verify": cmd_verify,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, nn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
