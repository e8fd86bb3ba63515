"""Input perturbations: projection, PGD, the YOPO slack loop and the TRADES attack.

Attacks ascend the per-example loss, so each perturbation row ``eta_i``
follows ``grad_eta l_i``. The slack variable is the same gradient taken at
the output of the first-layer block; freezing it lets the inner loop move
``eta`` while propagating through the first block only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Network, ShapeError, Trajectory, forward_sweep, param_grads, propagate, pullback
from .hamiltonian import LossFunction, softmax
from .instrumentation import PropCounter, tick
from .numerics import Rng, sample_uniform

DIRECTIONS = ("sign", "raw_gradient")
INITS = ("uniform", "zero")


def linf_project(eta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return np.clip(eta, -epsilon, epsilon)


@dataclass
class Perturbation:
    eta: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if np.any(np.abs(self.eta) > self.epsilon):
            raise ValueError("perturbation leaves the epsilon box")


@dataclass
class AttackConfig:
    steps: int = 20
    step_size: float = 0.01
    epsilon: float = 0.3
    direction: str = "sign"
    init: str = "uniform"
    project_each_step: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")


@dataclass
class FullPass:
    """One counted forward and backward sweep of a minibatch."""

    traj: Trajectory
    cotangents: list[np.ndarray]  # d(sum_i l_i)/dx_t for t = 0..T
    losses: np.ndarray

    def param_grads(self, net: Network) -> list[np.ndarray]:
        return param_grads(net, self.traj.states, self.cotangents)


def full_pass(net: Network, loss: LossFunction, x: np.ndarray, y,
              counter: PropCounter | None = None) -> FullPass:
    traj = forward_sweep(net, x, counter)
    g = loss.grad(traj.final, y)
    cots = pullback(net, traj.states, g)
    tick(counter, "full_backward")
    return FullPass(traj, cots, loss.values(traj.final, y))


def init_perturbation(shape, epsilon: float, init: str, rng: Rng | None) -> np.ndarray:
    if init == "zero" or rng is None:
        return np.zeros(shape)
    return sample_uniform(rng, shape, -epsilon, epsilon)


def step_direction(g: np.ndarray, direction: str) -> np.ndarray:
    return np.sign(g) if direction == "sign" else g


def pgd_attack(net: Network, loss: LossFunction, x: np.ndarray, y, cfg: AttackConfig,
               rng: Rng | None = None, counter: PropCounter | None = None) -> Perturbation:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eta = linf_project(init_perturbation(x.shape, cfg.epsilon, cfg.init, rng), cfg.epsilon)
    for _ in range(cfg.steps):
        g = full_pass(net, loss, x + eta, y, counter).cotangents[0]
        eta = eta + cfg.step_size * step_direction(g, cfg.direction)
        if cfg.project_each_step:
            eta = linf_project(eta, cfg.epsilon)
    return Perturbation(linf_project(eta, cfg.epsilon), cfg.epsilon)


@dataclass
class SlackVariable:
    """Loss gradient at the first-block output, frozen for the inner loop.

    ``first_params`` snapshots the first-block parameters of the pass that
    produced ``p``; ``grads`` are that pass's summed weight gradients.
    """

    p: np.ndarray
    first_params: list[np.ndarray]
    grads: list[np.ndarray]
    losses: np.ndarray
    traj: Trajectory


def _slack_from_pass(net: Network, fp: FullPass) -> SlackVariable:
    k0 = net.first_layer_len
    return SlackVariable(
        p=fp.cotangents[k0],
        first_params=[th.copy() for th in net.params[:k0]],
        grads=fp.param_grads(net),
        losses=fp.losses,
        traj=fp.traj,
    )


def compute_slack(net: Network, loss: LossFunction, x_plus_eta: np.ndarray, y,
                  counter: PropCounter | None = None) -> SlackVariable:
    return _slack_from_pass(net, full_pass(net, loss, x_plus_eta, y, counter))


def yopo_inner_loop(net: Network, x: np.ndarray, eta_init: np.ndarray, p_slack: np.ndarray,
                    n: int, step_size: float, epsilon: float, direction: str = "sign",
                    project_each_step: bool = True, first_params: list[np.ndarray] | None = None,
                    counter: PropCounter | None = None) -> Perturbation:
    """``n`` ascent steps on ``eta`` through the first block with ``p_slack`` frozen.

    Each step is one first-block forward and backward; the rest of the
    network is never touched.
    """
    if n < 1:
        raise ValueError("inner loop needs n >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    k0 = net.first_layer_len
    if p_slack.shape != (x.shape[0], net.layers[k0 - 1].out_dim):
        raise ShapeError(f"slack shape {p_slack.shape} does not match first-block output")
    block = net
    if first_params is not None:
        block = net.with_params(list(first_params) + list(net.params[k0:]))
    eta = np.array(eta_init, dtype=np.float64)
    for _ in range(n):
        states = propagate(block, x + eta, 0, k0)
        tick(counter, "first_layer_forward")
        g = pullback(block, states, p_slack, 0, k0)[0]
        tick(counter, "first_layer_backward")
        eta = eta + step_size * step_direction(g, direction)
        if project_each_step:
            eta = linf_project(eta, epsilon)
    return Perturbation(linf_project(eta, epsilon), epsilon)


# -- TRADES consistency loss ---------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - np.logaddexp.reduce(z, axis=-1, keepdims=True)


def kl_consistency(z_clean: np.ndarray, z_adv: np.ndarray) -> np.ndarray:
    """Per-example ``KL(softmax(z_clean) || softmax(z_adv))``."""
    lq = log_softmax(z_clean)
    return np.sum(np.exp(lq) * (lq - log_softmax(z_adv)), axis=-1)


def kl_grad_adv(z_clean: np.ndarray, z_adv: np.ndarray) -> np.ndarray:
    return softmax(z_adv) - softmax(z_clean)


def kl_grad_clean(z_clean: np.ndarray, z_adv: np.ndarray) -> np.ndarray:
    lq = log_softmax(z_clean)
    q = np.exp(lq)
    u = lq - log_softmax(z_adv)
    return q * (u - np.sum(q * u, axis=-1, keepdims=True))


def _paired_forward(net: Network, x: np.ndarray, x_adv: np.ndarray,
                    counter: PropCounter | None) -> tuple[Trajectory, Trajectory]:
    # clean and perturbed halves share one minibatch sweep
    B = x.shape[0]
    traj = forward_sweep(net, np.vstack([x, x_adv]), counter)
    return (Trajectory([s[:B] for s in traj.states]), Trajectory([s[B:] for s in traj.states]))


def trades_attack(net: Network, x: np.ndarray, cfg: AttackConfig, rng: Rng | None = None,
                  counter: PropCounter | None = None,
                  z_clean: np.ndarray | None = None) -> np.ndarray:
    """Sign-ascent on ``KL(f(x) || f(x'))`` inside the epsilon box around ``x``.

    The clean logits come from the first attack sweep (clean and perturbed
    rows are swept together) unless ``z_clean`` is supplied.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eta = linf_project(init_perturbation(x.shape, cfg.epsilon, cfg.init, rng), cfg.epsilon)
    for s in range(cfg.steps):
        if z_clean is None:
            clean, adv = _paired_forward(net, x, x + eta, counter)
            z_clean = clean.final
        else:
            adv = forward_sweep(net, x + eta, counter)
        g = pullback(net, adv.states, kl_grad_adv(z_clean, adv.final))[0]
        tick(counter, "full_backward")
        eta = eta + cfg.step_size * step_direction(g, cfg.direction)
        if cfg.project_each_step:
            eta = linf_project(eta, cfg.epsilon)
    return x + linf_project(eta, cfg.epsilon)


def compute_consistency_slack(net: Network, x: np.ndarray, x_plus_eta: np.ndarray,
                              z_clean: np.ndarray | None = None,
                              counter: PropCounter | None = None) -> tuple[SlackVariable, np.ndarray]:
    """Slack of the KL consistency loss; returns it with the clean logits used."""
    if z_clean is None:
        clean, adv = _paired_forward(net, x, x_plus_eta, counter)
        z_clean = clean.final
    else:
        adv = forward_sweep(net, x_plus_eta, counter)
    cots = pullback(net, adv.states, kl_grad_adv(z_clean, adv.final))
    tick(counter, "full_backward")
    fp = FullPass(adv, cots, kl_consistency(z_clean, adv.final))
    return _slack_from_pass(net, fp), z_clean
