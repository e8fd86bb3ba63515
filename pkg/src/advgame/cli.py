"""``advgame`` command line.

Subcommands: train, attack, eval, verify-pmp, bench, data gen. Exit codes:
0 success, 1 configuration or runtime error, 2 usage error.

Runs are described by a JSON config file with the sections ``train``
(TrainConfig fields), ``model``, ``data`` and optionally ``eval_data``;
see README.md for the schema. Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import AttackConfig, pgd_attack
from .data import Dataset, IdxError, SyntheticSpec, gen_synthetic, load_idx_dataset, write_idx
from .dynamics import init_mlp, load_network, save_network
from .hamiltonian import LossFunction, Regularizer, verify_pmp
from .instrumentation import PropCounter, count_report
from .numerics import Rng
from .training import METHODS, ConfigError, TrainConfig, evaluate, train

OUT_DIR_ENV = "ADVGAME_OUT_DIR"
SCHEMA_VERSION = 1

# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "method": str, "m": int, "n": int, "r": int, "seed": int, "epochs": int, "lr": float,
    "batch_size": int, "epsilon": float, "step_size": float, "momentum": float,
    "weight_decay": float, "trades_lambda": float, "direction": str, "init": str,
    "eval_steps": int, "eval_step_size": float, "loss": str,
}


class UsageError(Exception):
    pass


# -- config resolution -----------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be an object")
    unknown = set(cfg) - {"train", "model", "data", "eval_data", "schema_version"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config section")
    return cfg


def _resolve_train(cfg: dict, args) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    if getattr(args, "method", None) is not None and args.method != d.get("method"):
        # a new method invalidates the file's step counts
        for k in ("m", "n", "r", "delayed_update"):
            d.pop(k, None)
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if getattr(args, "delayed_update", None) is not None:
        d["delayed_update"] = args.delayed_update
    return TrainConfig.from_dict(d)


def _dataset_from(spec: dict | None, field: str) -> Dataset:
    if not spec:
        raise ConfigError(field, "no dataset given")
    if "synthetic" in spec:
        try:
            return gen_synthetic(SyntheticSpec(**spec["synthetic"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{field}.synthetic", str(exc)) from None
    if "idx" in spec:
        s = spec["idx"]
        for key in ("images", "labels"):
            if key not in s:
                raise ConfigError(f"{field}.idx.{key}", "missing path")
        return load_idx_dataset(s["images"], s["labels"], s.get("classes", 10))
    if "npz" in spec:
        return Dataset.load_npz(spec["npz"])
    raise ConfigError(field, "expected one of synthetic, idx, npz")


def _resolve_data(cfg: dict, args) -> tuple[Dataset, Dataset]:
    spec = cfg.get("data")
    if getattr(args, "data", None):
        spec = {"npz": args.data}
    train_set = _dataset_from(spec, "data")
    eval_spec = cfg.get("eval_data")
    if getattr(args, "eval_data", None):
        eval_spec = {"npz": args.eval_data}
    return train_set, (_dataset_from(eval_spec, "eval_data") if eval_spec else train_set)


def _resolve_model(cfg: dict, args, in_dim: int, classes: int):
    if getattr(args, "checkpoint", None):
        return load_network(args.checkpoint)
    m = dict(cfg.get("model", {}))
    if "checkpoint" in m:
        return load_network(m["checkpoint"])
    widths = m.get("widths", [in_dim, 32, 32, classes])
    if widths[0] != in_dim:
        raise ConfigError("model.widths", f"first width {widths[0]} != data dim {in_dim}")
    try:
        return init_mlp(widths, m.get("activation", "tanh"), m.get("init_seed", 0),
                        m.get("first_layer_len", 2))
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_DIR_ENV, "advgame-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _attack_from(args, cfg: TrainConfig) -> AttackConfig | None:
    if getattr(args, "attack", "pgd") == "none":
        return None
    eps = cfg.epsilon if args.attack_epsilon is None else args.attack_epsilon
    steps = cfg.eval_steps if args.attack_steps is None else args.attack_steps
    step = eps / 4 if args.attack_step_size is None else args.attack_step_size
    try:
        return AttackConfig(steps, step, eps, args.attack_direction, args.attack_init, True)
    except ValueError as exc:
        raise ConfigError("attack", str(exc)) from None


def _echo(cfg: dict, tc: TrainConfig) -> dict:
    out = {k: v for k, v in cfg.items() if k != "train"}
    out["train"] = tc.to_dict()
    out["schema_version"] = SCHEMA_VERSION
    return out


# -- subcommands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    tc = _resolve_train(cfg, args)
    train_set, eval_set = _resolve_data(cfg, args)
    net0 = _resolve_model(cfg, args, train_set.dim, train_set.classes)
    net, report = train(tc, train_set, net0, eval_set, record_timing=args.timing)
    out = _out_dir(args)
    echo = _echo(cfg, tc)
    save_network(net, out / "checkpoint.json")
    rep = report.to_dict()
    rep["resolved_config"] = echo
    _dump(out / "report.json", rep)
    header = "# advgame metrics " + json.dumps(echo, sort_keys=True) + "\n"
    (out / "metrics.csv").write_text(header + report.metrics_csv())
    print(json.dumps({"out": str(out), "final": report.epochs[-1] if report.epochs else None}))
    return 0 if report.audit["ok"] else 1


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    tc = _resolve_train(cfg, args)
    _, ds = _resolve_data(cfg, args)
    net = _resolve_model(cfg, args, ds.dim, ds.classes)
    atk = _attack_from(args, tc) or AttackConfig(0, 0.0, 0.0, "sign", "zero")
    loss = LossFunction(tc.loss)
    eta = pgd_attack(net, loss, ds.inputs, ds.labels, atk, Rng(tc.seed)).eta
    out = _out_dir(args)
    np.save(out / "perturbations.npy", eta)
    clean = loss.predict(net(ds.inputs)) == ds.labels
    attacked = loss.predict(net(ds.inputs + eta)) == ds.labels
    res = {
        "clean_acc": float(clean.mean()),
        "attacked_acc": float(attacked.mean()),
        "robust_acc": float((clean & attacked).mean()),
        "max_abs_eta": float(np.max(np.abs(eta))) if eta.size else 0.0,
        "attack": vars(atk),
        "config": _echo(cfg, tc),
        "seed": tc.seed,
    }
    _dump(out / "attack.json", res)
    print(json.dumps({k: res[k] for k in ("clean_acc", "attacked_acc", "robust_acc")}))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    tc = _resolve_train(cfg, args)
    _, ds = _resolve_data(cfg, args)
    net = _resolve_model(cfg, args, ds.dim, ds.classes)
    atk = _attack_from(args, tc)
    res = evaluate(net, ds, atk, LossFunction(tc.loss), seed=tc.seed)
    res.update({"attack": vars(atk) if atk else None, "config": _echo(cfg, tc), "seed": tc.seed})
    _dump(_out_dir(args) / "eval.json", res)
    print(json.dumps({"clean_acc": res["clean_acc"], "robust_acc": res["robust_acc"]}))
    return 0


def cmd_verify_pmp(args) -> int:
    cfg = _load_config(args.config)
    tc = _resolve_train(cfg, args)
    ds, _ = _resolve_data(cfg, args)
    net = _resolve_model(cfg, args, ds.dim, ds.classes)
    eta = np.zeros_like(ds.inputs)
    if args.perturbation:
        eta = np.load(args.perturbation)
        if eta.shape != ds.inputs.shape:
            raise ConfigError("perturbation", f"shape {eta.shape} does not match data {ds.inputs.shape}")
    eps = tc.epsilon if args.perturbation else 0.0
    reg = Regularizer("l2_weight", tc.weight_decay) if tc.weight_decay > 0 else Regularizer()
    rep = verify_pmp(net, LossFunction(tc.loss), ds.inputs, ds.labels, eta, eps, reg,
                     samples=args.samples, radius=args.radius, tolerance=args.tolerance, seed=tc.seed)
    out = rep.to_dict()
    out["config"] = _echo(cfg, tc)
    _dump(_out_dir(args) / "pmp.json", out)
    print(json.dumps({"weight_violation_rate": rep.weight_violation_rate,
                      "adversary_violation_rate": rep.adversary.rate}))
    return 0


def parse_grid(text: str) -> list[dict[str, int]]:
    """``"r=5;m=5,n=3"`` -> ``[{"r": 5}, {"m": 5, "n": 3}]``."""
    grid = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        setting = {}
        for kv in part.split(","):
            k, sep, v = kv.partition("=")
            k = k.strip()
            if not sep or k not in ("m", "n", "r"):
                raise UsageError(f"bad grid entry {kv!r}; expected m=, n= or r=")
            try:
                setting[k] = int(v)
            except ValueError:
                raise UsageError(f"grid value for {k} must be an integer, got {v!r}") from None
        grid.append(setting)
    return grid


BENCH_COLUMNS = ("method", "m", "n", "r", "minibatches", "full_forward", "full_backward",
                 "first_layer_forward", "first_layer_backward", "expected_full", "expected_first_layer",
                 "audit_ok", "clean_acc", "robust_acc", "wall_ms")


def cmd_bench(args) -> int:
    from .training import _STEP_FIELDS

    cfg = _load_config(args.config)
    base = dict(cfg.get("train", {}))
    for k in ("method", "m", "n", "r", "delayed_update"):
        base.pop(k, None)
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None and name not in ("method", "m", "n", "r"):
            base[name] = v
    methods = [s.strip() for s in args.methods.split(",") if s.strip()]
    for meth in methods:
        if meth not in METHODS:
            raise UsageError(f"unknown method {meth!r}")
    grid = parse_grid(args.grid)
    train_set, eval_set = _resolve_data(cfg, args)
    net0 = _resolve_model(cfg, args, train_set.dim, train_set.classes)
    rows = []
    for meth in methods:
        settings = [s for s in grid if set(s) == set(_STEP_FIELDS[meth])] or ([{}] if meth == "natural" else [])
        for s in settings:
            tc = TrainConfig.from_dict({**base, "method": meth, **s})
            counter = PropCounter()
            t0 = time.perf_counter()
            _, rep = train(tc, train_set, net0, eval_set, counter=counter, evaluate_every_epoch=False)
            wall = 1e3 * (time.perf_counter() - t0)
            audit = count_report(counter, tc, rep.minibatches)
            last = rep.epochs[-1] if rep.epochs else {}
            rows.append({
                "method": meth, "m": tc.m, "n": tc.n, "r": tc.r, "minibatches": rep.minibatches,
                **audit.observed,
                "expected_full": audit.expected["full_forward"],
                "expected_first_layer": audit.expected["first_layer_forward"],
                "audit_ok": audit.ok,
                "clean_acc": last.get("clean_acc"), "robust_acc": last.get("robust_acc"),
                "wall_ms": round(wall, 3),
            })
    out = _out_dir(args)
    buf = io.StringIO()
    buf.write("# advgame bench " + json.dumps({**cfg, "train": base, "methods": methods, "grid": grid},
                                              sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: "" if row[k] is None else row[k] for k in BENCH_COLUMNS})
    (out / "bench.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 0 if all(r["audit_ok"] for r in rows) else 1


def cmd_data_gen(args) -> int:
    try:
        spec = SyntheticSpec(args.kind, args.dim, args.examples, args.margin, args.noise, args.seed)
    except ValueError as exc:
        raise ConfigError("synthetic", str(exc)) from None
    ds = gen_synthetic(spec)
    out = _out_dir(args)
    meta = {"synthetic": vars(spec), "format": args.format}
    if args.format == "npz":
        ds.save_npz(out / f"{args.name}.npz")
    else:
        lo, hi = float(ds.inputs.min()), float(ds.inputs.max())
        scaled = (ds.inputs - lo) / (hi - lo) if hi > lo else np.zeros_like(ds.inputs)
        (out / f"{args.name}-images.idx").write_bytes(write_idx(scaled))
        (out / f"{args.name}-labels.idx").write_bytes(write_idx(ds.labels.astype(np.uint8)))
        # idx stores bytes only; record the affine map back to raw units
        meta["normalization"] = {"scale": 1.0 / (hi - lo) if hi > lo else 0.0, "offset": lo}
    _dump(out / f"{args.name}.json", meta)
    print(json.dumps({"out": str(out), "examples": len(ds)}))
    return 0


# -- argument parsing ----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, train_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./advgame-out)")
    p.add_argument("--data", help="training/evaluation data as .npz (overrides config)")
    p.add_argument("--eval-data", help="held-out data as .npz (overrides config)")
    if train_flags:
        for name, typ in _TRAIN_FLAGS.items():
            kw = {"choices": METHODS} if name == "method" else {}
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, **kw)
        g = p.add_mutually_exclusive_group()
        g.add_argument("--delayed-update", dest="delayed_update", action="store_true", default=None)
        g.add_argument("--no-delayed-update", dest="delayed_update", action="store_false")


def _add_attack(p: argparse.ArgumentParser, allow_none: bool) -> None:
    p.add_argument("--attack", choices=("pgd", "none") if allow_none else ("pgd",), default="pgd")
    p.add_argument("--attack-steps", type=int)
    p.add_argument("--attack-step-size", type=float)
    p.add_argument("--attack-epsilon", type=float)
    p.add_argument("--attack-direction", choices=("sign", "raw_gradient"), default="sign")
    p.add_argument("--attack-init", choices=("uniform", "zero"), default="uniform")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advgame", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network, write checkpoint, report and metrics")
    _add_common(p)
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--timing", action="store_true", help="record wall-clock times (breaks byte reproducibility)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="PGD-attack a checkpoint and save the perturbations")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    _add_attack(p, allow_none=False)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    _add_attack(p, allow_none=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-pmp", help="sampled check of the layerwise Hamiltonian conditions")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--perturbation", help=".npy perturbation from `attack` (default: none)")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_verify_pmp)

    p = sub.add_parser("bench", help="propagation counts and wall time over methods x settings")
    _add_common(p)
    p.add_argument("--methods", required=True, help="comma-separated, e.g. pgd,yopo")
    p.add_argument("--grid", required=True, help='settings, e.g. "r=5;m=5,n=3"')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("data", help="dataset utilities")
    dsub = p.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=("two_gaussians", "two_moons"), default="two_gaussians")
    g.add_argument("--dim", type=int, default=10)
    g.add_argument("--examples", type=int, default=2000)
    g.add_argument("--margin", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.6)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("npz", "idx"), default="npz")
    g.add_argument("--name", default="synthetic")
    g.add_argument("--out")
    g.set_defaults(func=cmd_data_gen)
    return ap


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"advgame: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"advgame: config error in field '{exc.field}': {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, IdxError) as exc:
        print(f"advgame: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
