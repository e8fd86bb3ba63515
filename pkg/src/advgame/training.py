"""Trainers for natural, PGD, YOPO, Free, TRADES and TRADES-YOPO adversarial training.

All trainers minimise the minibatch-mean loss with momentum SGD. They
differ only in how the perturbation for each minibatch is produced and
which propagations feed the weight gradient; see ``expected_counts`` in
``instrumentation`` for the cost of each.
"""
from __future__ import annotations

import csv
import io
import json
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .adversary import (
    AttackConfig,
    compute_consistency_slack,
    compute_slack,
    full_pass,
    init_perturbation,
    kl_consistency,
    kl_grad_adv,
    kl_grad_clean,
    linf_project,
    pgd_attack,
    step_direction,
    trades_attack,
    yopo_inner_loop,
    _paired_forward,
)
from .data import Dataset, batches
from .dynamics import Network, param_grads, pullback
from .hamiltonian import LOSS_KINDS, LossFunction
from .instrumentation import CountAudit, PropCounter, count_report, tick
from .numerics import Rng

METHODS = ("natural", "pgd", "yopo", "free", "trades", "trades_yopo")

# keys for the independent random streams derived from the run seed
STREAM_ATTACK = 1
STREAM_EVAL = 2

# which step-count fields each method takes
_STEP_FIELDS = {
    "natural": (),
    "pgd": ("r",),
    "trades": ("r",),
    "yopo": ("m", "n"),
    "trades_yopo": ("m", "n"),
    "free": ("m",),
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass
class TrainConfig:
    method: str = "natural"
    m: int | None = None
    n: int | None = None
    r: int | None = None
    step_size: float = 0.1          # attack step alpha_1
    lr: float = 0.1                 # learning rate alpha_2
    lr_schedule: list = field(default_factory=list)  # [(epoch, multiplier), ...]
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    epochs: int = 1
    epsilon: float = 0.3
    trades_lambda: float = 1.0
    seed: int = 0
    delayed_update: bool | None = None  # None: True for yopo, False for free
    direction: str = "sign"
    init: str = "uniform"
    project_each_step: bool = True
    loss: str = "softmax_cross_entropy"
    eval_steps: int = 20
    eval_step_size: float | None = None  # None: epsilon / 4

    def __post_init__(self):
        self.lr_schedule = [tuple(e) for e in self.lr_schedule]
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}, got {self.method!r}")
        wanted = _STEP_FIELDS[self.method]
        for name in ("m", "n", "r"):
            v = getattr(self, name)
            if name in wanted:
                if v is None:
                    raise ConfigError(name, f"required for method {self.method}")
                if not isinstance(v, int) or v < 1:
                    raise ConfigError(name, "must be an integer >= 1")
            elif v is not None:
                raise ConfigError(name, f"not used by method {self.method}")
        if self.delayed_update is not None and self.method not in ("yopo", "free"):
            raise ConfigError("delayed_update", "only meaningful for yopo and free")
        for name in ("step_size", "lr", "weight_decay", "epsilon"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.trades_lambda <= 0:
            raise ConfigError("trades_lambda", "must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.direction not in ("sign", "raw_gradient"):
            raise ConfigError("direction", "must be sign or raw_gradient")
        if self.init not in ("uniform", "zero"):
            raise ConfigError("init", "must be uniform or zero")
        if self.loss not in LOSS_KINDS:
            raise ConfigError("loss", f"must be one of {LOSS_KINDS}")
        if self.eval_steps < 0:
            raise ConfigError("eval_steps", "must be >= 0")
        prev = -1
        for item in self.lr_schedule:
            if len(item) != 2:
                raise ConfigError("lr_schedule", "entries are (epoch, multiplier) pairs")
            if item[0] <= prev:
                raise ConfigError("lr_schedule", "epochs must be strictly increasing")
            prev = item[0]

    @property
    def delayed(self) -> bool:
        if self.delayed_update is None:
            return self.method != "free"
        return self.delayed_update

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e, mult in self.lr_schedule:
            if e <= epoch:
                lr *= mult
        return lr

    def attack_config(self, steps: int) -> AttackConfig:
        return AttackConfig(steps, self.step_size, self.epsilon, self.direction, self.init,
                            self.project_each_step)

    def eval_attack(self) -> AttackConfig:
        a = self.epsilon / 4 if self.eval_step_size is None else self.eval_step_size
        return AttackConfig(self.eval_steps, a, self.epsilon, "sign", "uniform", True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(e) for e in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown config field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None


# -- optimiser -----------------------------------------------------------------

def sgd_update(theta: np.ndarray, grad: np.ndarray, lr: float, momentum: float,
               weight_decay: float, state: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball step: ``v = momentum*v + grad + wd*theta``, ``theta -= lr*v``."""
    if np.shape(theta) != np.shape(grad):
        raise ValueError(f"shape mismatch {np.shape(theta)} vs {np.shape(grad)}")
    v = np.zeros_like(theta) if state is None else state
    v = momentum * v + grad + weight_decay * theta
    return theta - lr * v, v


class SGD:
    def __init__(self, lr: float, momentum: float, weight_decay: float):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.state: list[np.ndarray | None] | None = None

    def step(self, net: Network, grads: list[np.ndarray]) -> None:
        if self.state is None:
            self.state = [None] * len(grads)
        for t, g in enumerate(grads):
            if g.size == 0:
                continue
            net.params[t], self.state[t] = sgd_update(
                net.params[t], g, self.lr, self.momentum, self.weight_decay, self.state[t])


def mean_loss_grads(net: Network, loss: LossFunction, x: np.ndarray, y) -> tuple[float, list[np.ndarray]]:
    """Mean loss over the rows of ``x`` and its parameter gradient (uncounted)."""
    fp = full_pass(net, loss, x, y)
    B = x.shape[0]
    return float(fp.losses.mean()), [g / B for g in fp.param_grads(net)]


class _RunningMean:
    # the running form returns g exactly when every term equals g
    def __init__(self):
        self.k = 0
        self.value: list[np.ndarray] | None = None

    def add(self, grads: list[np.ndarray]) -> None:
        self.k += 1
        if self.value is None:
            self.value = [g.copy() for g in grads]
        else:
            self.value = [v + (g - v) / self.k for v, g in zip(self.value, grads)]


# -- per-minibatch steps ---------------------------------------------------------

def _natural_step(net, loss, opt, cfg, x, y, rng, counter):
    fp = full_pass(net, loss, x, y, counter)
    opt.step(net, [g / x.shape[0] for g in fp.param_grads(net)])
    return float(fp.losses.mean())


def _pgd_step(net, loss, opt, cfg, x, y, rng, counter):
    pert = pgd_attack(net, loss, x, y, cfg.attack_config(cfg.r), rng, counter)
    fp = full_pass(net, loss, x + pert.eta, y, counter)
    opt.step(net, [g / x.shape[0] for g in fp.param_grads(net)])
    return float(fp.losses.mean())


def _yopo_step(net, loss, opt, cfg, x, y, rng, counter):
    B = x.shape[0]
    eta = linf_project(init_perturbation(x.shape, cfg.epsilon, cfg.init, rng), cfg.epsilon)
    slack = compute_slack(net, loss, x + eta, y, counter)
    acc = _RunningMean()
    losses = []
    for _ in range(cfg.m):
        eta = yopo_inner_loop(net, x, eta, slack.p, cfg.n, cfg.step_size, cfg.epsilon,
                              cfg.direction, cfg.project_each_step, slack.first_params, counter).eta
        # this pass gives weight gradient j and the slack for round j+1
        slack = compute_slack(net, loss, x + eta, y, counter)
        grads = [g / B for g in slack.grads]
        losses.append(float(slack.losses.mean()))
        if cfg.delayed:
            acc.add(grads)
        else:
            opt.step(net, grads)
    if cfg.delayed:
        opt.step(net, acc.value)
    return float(np.mean(losses))


def _free_step(net, loss, opt, cfg, x, y, rng, counter):
    # reference Free-m: replay the minibatch m times, reusing each backward's
    # input gradient for the next perturbation step
    B = x.shape[0]
    eta = linf_project(init_perturbation(x.shape, cfg.epsilon, cfg.init, rng), cfg.epsilon)
    fp = full_pass(net, loss, x + eta, y, counter)
    acc = _RunningMean()
    losses = []
    for _ in range(cfg.m):
        eta = eta + cfg.step_size * step_direction(fp.cotangents[0], cfg.direction)
        # returned perturbations are always feasible, whatever project_each_step says
        eta = linf_project(eta, cfg.epsilon)
        fp = full_pass(net, loss, x + eta, y, counter)
        grads = [g / B for g in fp.param_grads(net)]
        losses.append(float(fp.losses.mean()))
        if cfg.delayed:
            acc.add(grads)
        else:
            opt.step(net, grads)
    if cfg.delayed:
        opt.step(net, acc.value)
    return float(np.mean(losses))


def trades_objective_grads(net: Network, loss: LossFunction, x: np.ndarray, y, x_adv: np.ndarray,
                           lam: float, counter: PropCounter | None = None) -> tuple[float, list[np.ndarray]]:
    """Mean of ``l(f(x), y) + KL(f(x) || f(x_adv)) / lam`` and its parameter gradient.

    Clean and perturbed rows go through one stacked sweep each way.
    """
    B = x.shape[0]
    clean, adv = _paired_forward(net, x, x_adv, counter)
    zc, za = clean.final, adv.final
    value = loss.values(zc, y) + kl_consistency(zc, za) / lam
    g_out = np.vstack([loss.grad(zc, y) + kl_grad_clean(zc, za) / lam, kl_grad_adv(zc, za) / lam])
    states = [np.vstack([c, a]) for c, a in zip(clean.states, adv.states)]
    cots = pullback(net, states, g_out)
    tick(counter, "full_backward")
    return float(value.mean()), [g / B for g in param_grads(net, states, cots)]


def _trades_step(net, loss, opt, cfg, x, y, rng, counter):
    x_adv = trades_attack(net, x, cfg.attack_config(cfg.r), rng, counter)
    value, grads = trades_objective_grads(net, loss, x, y, x_adv, cfg.trades_lambda, counter)
    opt.step(net, grads)
    return value


def _trades_yopo_step(net, loss, opt, cfg, x, y, rng, counter):
    eta = linf_project(init_perturbation(x.shape, cfg.epsilon, cfg.init, rng), cfg.epsilon)
    z_clean = None
    for _ in range(cfg.m):
        slack, z_clean = compute_consistency_slack(net, x, x + eta, z_clean, counter)
        eta = yopo_inner_loop(net, x, eta, slack.p, cfg.n, cfg.step_size, cfg.epsilon,
                              cfg.direction, cfg.project_each_step, None, counter).eta
    # only the final perturbation enters the weight update
    value, grads = trades_objective_grads(net, loss, x, y, x + eta, cfg.trades_lambda, counter)
    opt.step(net, grads)
    return value


_STEPS: dict[str, Callable] = {
    "natural": _natural_step,
    "pgd": _pgd_step,
    "yopo": _yopo_step,
    "free": _free_step,
    "trades": _trades_step,
    "trades_yopo": _trades_yopo_step,
}


# -- evaluation ----------------------------------------------------------------

def evaluate(net: Network, dataset: Dataset, attack: AttackConfig | None = None,
             loss: LossFunction | None = None, seed: int = 0, batch_size: int = 1024) -> dict:
    """Clean accuracy and accuracy under ``attack``.

    An example counts as robust only if it is classified correctly both
    clean and perturbed, since ``eta = 0`` is always a feasible attack.
    """
    loss = loss or LossFunction()
    N = len(dataset)
    clean_ok = np.zeros(N, dtype=bool)
    robust_ok = np.zeros(N, dtype=bool)
    rng = Rng(seed)
    for b, start in enumerate(range(0, N, batch_size)):
        sl = slice(start, min(start + batch_size, N))
        x, y = dataset.inputs[sl], dataset.labels[sl]
        clean_ok[sl] = loss.predict(net(x)) == y
        if attack is None:
            robust_ok[sl] = clean_ok[sl]
            continue
        eta = pgd_attack(net, loss, x, y, attack, rng.child(b)).eta
        robust_ok[sl] = clean_ok[sl] & (loss.predict(net(x + eta)) == y)
    if N == 0:
        return {"clean_acc": 0.0, "robust_acc": 0.0}
    return {"clean_acc": float(clean_ok.mean()), "robust_acc": float(robust_ok.mean())}


# -- training loop ---------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "clean_acc", "robust_acc", "loss", "full_props", "first_layer_props", "wall_ms")


@dataclass
class RunReport:
    config: dict
    seed: int
    epochs: list[dict]
    counters: dict
    minibatches: int
    audit: dict
    wall_time_s: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.epochs:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in METRIC_COLUMNS])
        return buf.getvalue()


def train(config: TrainConfig, dataset: Dataset, net_init: Network, eval_set: Dataset | None = None,
          counter: PropCounter | None = None, record_timing: bool = False,
          evaluate_every_epoch: bool = True,
          on_step: Callable[[Network], None] | None = None) -> tuple[Network, RunReport]:
    """Train a copy of ``net_init``; ``net_init`` itself is never modified.

    ``eval_set`` (default: the training set) is scored after each epoch,
    clean and under ``config.eval_attack()``. ``on_step`` is called with
    the network after every minibatch. Wall-clock fields are only filled
    when ``record_timing`` is set, so untimed runs are byte-reproducible.
    """
    config.validate()
    if dataset.dim != net_init.in_dim:
        raise ConfigError("dataset", f"input dim {dataset.dim} != network input dim {net_init.in_dim}")
    net = net_init.copy()
    net.seed_lineage = list(net.seed_lineage) + [config.seed]
    loss = LossFunction(config.loss)
    counter = counter if counter is not None else PropCounter()
    opt = SGD(config.lr, config.momentum, config.weight_decay)
    step = _STEPS[config.method]
    root = Rng(config.seed)
    eval_set = dataset if eval_set is None else eval_set
    rows = []
    n_mb = 0
    t_start = time.perf_counter()
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        t0 = time.perf_counter()
        losses, sizes = [], []
        for b, idx in enumerate(batches(len(dataset), config.batch_size, config.seed, epoch)):
            x, y = dataset.inputs[idx], dataset.labels[idx]
            with counter.timed("train") if record_timing else nullcontext():
                losses.append(step(net, loss, opt, config, x, y, root.child(STREAM_ATTACK, epoch, b), counter))
            sizes.append(len(idx))
            n_mb += 1
            if on_step is not None:
                on_step(net)
        row = {
            "epoch": epoch,
            "clean_acc": None,
            "robust_acc": None,
            "loss": float(np.average(losses, weights=sizes)) if losses else None,
            "full_props": counter.full_forward,
            "first_layer_props": counter.first_layer_forward,
            "wall_ms": 1e3 * (time.perf_counter() - t0) if record_timing else None,
        }
        if evaluate_every_epoch or epoch == config.epochs - 1:
            row.update(evaluate(net, eval_set, config.eval_attack(), loss,
                                seed=int(root.child(STREAM_EVAL, epoch).generator.integers(2**63))))
        rows.append(row)
    audit = count_report(counter, config, n_mb)
    report = RunReport(
        config=config.to_dict(),
        seed=config.seed,
        epochs=rows,
        counters=counter.snapshot(),
        minibatches=n_mb,
        audit=audit.to_dict(),
        wall_time_s=(time.perf_counter() - t_start) if record_timing else None,
    )
    return net, report

