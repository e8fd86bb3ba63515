"""Hamiltonians, co-states and the maximum-principle checker.

For layer ``t`` the Hamiltonian is ``H_t(x, p, theta) = p . f_t(x, theta) -
R_t(theta) / B``. The co-state recursion runs backwards from
``p_T = -grad loss / B`` through ``p_t = J_x f_t^T p_{t+1}``, which is
ordinary back-propagation with the sign flipped. Ascending ``sum_i H_t``
in ``theta_t`` is therefore the same step as descending the training
objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import (
    LayerSpec,
    Network,
    ShapeError,
    Trajectory,
    forward_sweep,
    jvp_x,
    layer_forward,
    param_grads,
    propagate,
    pullback,
)
from .instrumentation import PropCounter, tick
from .numerics import Rng


@dataclass(frozen=True)
class Regularizer:
    kind: str = "none"
    coef: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "l2_weight"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.coef < 0:
            raise ValueError("regularizer coefficient must be non-negative")

    def value(self, theta: np.ndarray) -> float:
        if self.kind == "none":
            return 0.0
        return 0.5 * self.coef * float(theta @ theta)

    def grad_theta(self, theta: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return np.zeros_like(theta)
        return self.coef * theta


NO_REG = Regularizer()


class LabelError(ValueError):
    pass


LOSS_KINDS = ("softmax_cross_entropy", "squared_error", "negative_logit")


@dataclass(frozen=True)
class LossFunction:
    """Per-example data-fitting loss on the network output.

    ``softmax_cross_entropy`` takes integer class labels. ``squared_error``
    is ``||x - y||^2`` and takes float targets; integer labels are one-hot
    encoded against the output width. ``negative_logit`` is ``-x[y]``, affine
    in the output, which makes the chain-rule coincidence checks exact.
    """

    kind: str = "softmax_cross_entropy"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")

    def _labels(self, x: np.ndarray, y) -> np.ndarray:
        y = np.asarray(y)
        if y.shape != (x.shape[0],):
            raise LabelError(f"expected {x.shape[0]} labels, got shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise LabelError("class labels must be integers")
            y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= x.shape[1]):
            raise LabelError(f"label out of range [0, {x.shape[1]})")
        return y

    def _targets(self, x: np.ndarray, y) -> np.ndarray:
        y = np.asarray(y)
        if np.issubdtype(y.dtype, np.integer) and y.ndim == 1 and x.shape[1] > 1:
            return np.eye(x.shape[1])[self._labels(x, y)]
        y = y.astype(np.float64)
        if y.ndim == 1:
            y = y.reshape(x.shape[0], -1)
        if y.shape != x.shape:
            raise LabelError(f"target shape {y.shape} does not match output {x.shape}")
        return y

    def values(self, x: np.ndarray, y) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "squared_error":
            r = x - self._targets(x, y)
            return np.sum(r * r, axis=1)
        y = self._labels(x, y)
        if self.kind == "negative_logit":
            return -x[np.arange(x.shape[0]), y]
        lse = np.logaddexp.reduce(x, axis=1)
        return lse - x[np.arange(x.shape[0]), y]

    def grad(self, x: np.ndarray, y) -> np.ndarray:
        """Per-example gradient of the loss with respect to the output."""
        x = np.atleast_2d(x)
        if self.kind == "squared_error":
            return 2.0 * (x - self._targets(x, y))
        y = self._labels(x, y)
        if self.kind == "negative_logit":
            g = np.zeros_like(x)
            g[np.arange(x.shape[0]), y] = -1.0
            return g
        g = softmax(x)
        g[np.arange(x.shape[0]), y] -= 1.0
        return g

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(np.atleast_2d(x), axis=1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def hamiltonian_value(layer: LayerSpec, theta: np.ndarray, x: np.ndarray, p: np.ndarray,
                      reg: Regularizer = NO_REG, batch_size: int = 1) -> float:
    """``p . f(x, theta) - R(theta) / B``.

    With a batch of rows this is the batch sum ``sum_i H(x_i, p_i, theta)``,
    so the regularizer is subtracted once per row.
    """
    fx = layer_forward(layer, theta, x)
    if fx.shape != np.shape(p):
        raise ShapeError(f"co-state shape {np.shape(p)} does not match f output {fx.shape}")
    rows = 1 if fx.ndim == 1 else fx.shape[0]
    return float(np.sum(p * fx)) - rows * reg.value(theta) / batch_size


def terminal_costate(loss: LossFunction, x_T: np.ndarray, y, batch_size: int | None = None) -> np.ndarray:
    x_T = np.atleast_2d(x_T)
    B = x_T.shape[0] if batch_size is None else batch_size
    return -loss.grad(x_T, y) / B


@dataclass
class CostateTrajectory:
    """Co-states ``p_t`` for t = 0..T, each shaped ``(batch, d_t)``."""

    costates: list[np.ndarray]

    def __getitem__(self, t: int) -> np.ndarray:
        return self.costates[t]

    def __len__(self) -> int:
        return len(self.costates)


def backward_sweep(net: Network, traj: Trajectory, p_T: np.ndarray, reg: Regularizer = NO_REG,
                   batch_size: int | None = None, counter: PropCounter | None = None) -> CostateTrajectory:
    # the regularizer depends on theta only, so its x-gradient term vanishes
    if traj.T != net.T:
        raise ShapeError(f"trajectory has {traj.T} steps, network has {net.T} layers")
    for t, (layer, s) in enumerate(zip(net.layers, traj.states)):
        if s.shape[-1] != layer.in_dim:
            raise ShapeError(f"trajectory state {t} has dim {s.shape[-1]}, layer expects {layer.in_dim}")
    p_T = np.atleast_2d(p_T)
    if p_T.shape != traj.final.shape:
        raise ShapeError(f"terminal co-state {p_T.shape} does not match final state {traj.final.shape}")
    ps = pullback(net, traj.states, p_T)
    tick(counter, "full_backward")
    return CostateTrajectory(ps)


def hamiltonian_theta_grad(net: Network, traj: Trajectory, costates: CostateTrajectory,
                           reg: Regularizer = NO_REG, batch_size: int | None = None) -> list[np.ndarray]:
    """Per-layer ``grad_theta sum_i H_t(x_{i,t}, p_{i,t+1}, theta_t)``."""
    if len(costates) != len(traj.states):
        raise ShapeError("co-state and state trajectories differ in length")
    rows = traj.states[0].shape[0]
    B = rows if batch_size is None else batch_size
    grads = param_grads(net, traj.states, costates.costates)
    return [g - (rows / B) * reg.grad_theta(th) for g, th in zip(grads, net.params)]


def linearized_sweep(net: Network, traj: Trajectory, theta_prime, phi0: np.ndarray) -> Trajectory:
    """Propagate ``phi`` through the dynamics linearised about ``traj``.

    ``phi_{t+1} = f_t(x*_t, theta'_t) + J_x f_t(x*_t, theta'_t) (phi_t - x*_t)``.
    """
    if traj.T != net.T or len(theta_prime) != net.T:
        raise ShapeError("trajectory, parameters and network must have the same length")
    phi = [np.atleast_2d(np.asarray(phi0, dtype=np.float64))]
    if phi[0].shape != traj.states[0].shape:
        raise ShapeError(f"phi0 shape {phi[0].shape} does not match x*_0 {traj.states[0].shape}")
    for t, layer in enumerate(net.layers):
        xs = traj.states[t]
        th = np.asarray(theta_prime[t], dtype=np.float64)
        phi.append(layer_forward(layer, th, xs) + jvp_x(layer, th, xs, phi[t] - xs))
    return Trajectory(phi)


@dataclass
class SideReport:
    violations: int
    samples: int
    max_gap: float

    @property
    def rate(self) -> float:
        return self.violations / self.samples if self.samples else 0.0


@dataclass
class LayerReport(SideReport):
    layer: int = -1


@dataclass
class PmpReport:
    per_layer: list[LayerReport]
    adversary: SideReport
    tolerance: float
    radius: float
    epsilon: float
    seed: int
    batch_size: int
    weight_violation_rate: float = field(init=False)

    def __post_init__(self):
        tot = sum(l.samples for l in self.per_layer)
        self.weight_violation_rate = sum(l.violations for l in self.per_layer) / tot if tot else 0.0

    def to_dict(self) -> dict:
        return {
            "per_layer": [
                {"layer": l.layer, "violations": l.violations, "samples": l.samples,
                 "max_gap": l.max_gap, "rate": l.rate} for l in self.per_layer
            ],
            "adversary": {**asdict(self.adversary), "rate": self.adversary.rate},
            "weight_violation_rate": self.weight_violation_rate,
            "tolerance": self.tolerance,
            "radius": self.radius,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "batch_size": self.batch_size,
        }


def verify_pmp(net: Network, loss: LossFunction, x: np.ndarray, y, eta_star: np.ndarray | None = None,
               epsilon: float = 0.0, reg: Regularizer = NO_REG, samples: int = 1000, radius: float = 0.1,
               tolerance: float = 1e-6, seed: int = 0) -> PmpReport:
    """Sample-based check of the layerwise maximum conditions at ``(theta*, eta*)``.

    Weight side: for each parametrised layer, draw ``theta'`` uniformly from
    the box of half-width ``radius`` around ``theta*`` and count draws with
    ``sum_i H_t(theta') > sum_i H_t(theta*) + tolerance``. Adversary side:
    draw ``eta`` uniformly from the epsilon box and count draws where the
    first-block Hamiltonian falls more than ``tolerance`` below its value
    at ``eta*`` (the adversary minimises it). Never raises on a violation.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    eta_star = np.zeros_like(x) if eta_star is None else np.asarray(eta_star, dtype=np.float64)
    rng = Rng(seed)
    traj = forward_sweep(net, x + eta_star)
    ps = backward_sweep(net, traj, terminal_costate(loss, traj.final, y, B), reg, B)

    per_layer = []
    for t, layer in enumerate(net.layers):
        if layer.n_params == 0:
            continue
        lrng = rng.child(t)
        theta = net.params[t]
        h_star = hamiltonian_value(layer, theta, traj.states[t], ps[t + 1], reg, B)
        viol, max_gap = 0, -np.inf
        for _ in range(samples):
            th = theta + lrng.generator.uniform(-radius, radius, size=theta.shape)
            gap = hamiltonian_value(layer, th, traj.states[t], ps[t + 1], reg, B) - h_star
            max_gap = max(max_gap, gap)
            viol += gap > tolerance
        per_layer.append(LayerReport(int(viol), samples, float(max_gap) if samples else 0.0, layer=t))

    k0 = net.first_layer_len
    p_k0 = ps[k0]

    def h_first(eta):
        return float(np.sum(p_k0 * propagate(net, x + eta, 0, k0)[-1]))

    arng = rng.child(net.T)
    h_adv = h_first(eta_star)
    viol, max_gap = 0, -np.inf
    for _ in range(samples):
        eta = arng.generator.uniform(-epsilon, epsilon, size=x.shape)
        gap = h_adv - h_first(eta)
        max_gap = max(max_gap, gap)
        viol += gap > tolerance
    adversary = SideReport(int(viol), samples, float(max_gap) if samples else 0.0)
    return PmpReport(per_layer, adversary, tolerance, radius, epsilon, seed, B)
