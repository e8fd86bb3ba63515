"""Adversarial training as a layerwise differential game.

Networks are discrete-time dynamical systems; training is a game between
the weights and an input perturbation. The package provides the forward
and co-state sweeps, Hamiltonian gradients, PGD / YOPO / Free / TRADES
trainers with exact propagation accounting, and a sampled checker for
the layerwise maximum conditions.
"""
__version__ = "0.1.0"

from .adversary import (
    AttackConfig,
    Perturbation,
    SlackVariable,
    compute_slack,
    linf_project,
    pgd_attack,
    trades_attack,
    yopo_inner_loop,
)
from .data import Dataset, SyntheticSpec, batches, gen_synthetic, parse_idx, write_idx
from .dynamics import LayerSpec, Network, Trajectory, forward_sweep, init_mlp, layer_forward, vjp_theta, vjp_x
from .hamiltonian import (
    CostateTrajectory,
    LossFunction,
    PmpReport,
    Regularizer,
    backward_sweep,
    hamiltonian_theta_grad,
    hamiltonian_value,
    linearized_sweep,
    terminal_costate,
    verify_pmp,
)
from .instrumentation import CountAudit, PropCounter, count_report, expected_counts
from .numerics import Rng, finite_diff_grad, sample_uniform
from .training import ConfigError, RunReport, TrainConfig, evaluate, sgd_update, train
