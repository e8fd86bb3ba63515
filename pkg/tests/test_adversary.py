import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advgame.adversary import (
    AttackConfig,
    Perturbation,
    compute_consistency_slack,
    compute_slack,
    kl_consistency,
    kl_grad_adv,
    kl_grad_clean,
    linf_project,
    pgd_attack,
    trades_attack,
    yopo_inner_loop,
)
from advgame.dynamics import ShapeError, forward_sweep, propagate
from advgame.hamiltonian import LossFunction, backward_sweep, terminal_costate
from advgame.instrumentation import PropCounter
from advgame.numerics import Rng, finite_diff_grad, rel_err

from conftest import affine_net, random_net

CE = LossFunction()
SQ = LossFunction("squared_error")
NEG = LossFunction("negative_logit")


def test_project_examples():
    assert np.array_equal(linf_project(np.array([0.5, -0.5, 0.1]), 0.3), [0.3, -0.3, 0.1])
    assert np.array_equal(linf_project(np.array([0.2, -1.0]), 0.0), [0.0, 0.0])


def test_project_rejects_negative_radius():
    with pytest.raises(ValueError):
        linf_project(np.zeros(2), -0.1)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5)), st.floats(0, 3))
def test_project_idempotent_and_feasible(eta, eps):
    p = linf_project(eta, eps)
    assert np.all(np.abs(p) <= eps)
    assert np.array_equal(linf_project(p, eps), p)


def test_perturbation_rejects_infeasible():
    with pytest.raises(ValueError):
        Perturbation(np.array([0.5]), 0.3)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(direction="l2")
    with pytest.raises(ValueError):
        AttackConfig(steps=-1)


def test_pgd_zero_epsilon():
    net = random_net(1)
    x = Rng(1).generator.standard_normal((3, 3))
    cfg = AttackConfig(steps=5, step_size=0.1, epsilon=0.0)
    assert np.array_equal(pgd_attack(net, CE, x, [0, 1, 0], cfg, Rng(0)).eta, np.zeros((3, 3)))


def test_pgd_identity_hits_box_edge():
    # loss (x + eta + 1)^2 / 2 grows with eta, so the attack ends at +epsilon
    net = affine_net([[1.0]], [0.0])
    cfg = AttackConfig(steps=3, step_size=0.2, epsilon=0.3, init="zero")
    eta = pgd_attack(net, SQ, np.array([[0.0]]), np.array([[-1.0]]), cfg).eta
    assert eta.item() == pytest.approx(0.3, abs=1e-15)


def test_pgd_counts():
    net = random_net(2)
    c = PropCounter()
    pgd_attack(net, CE, np.zeros((4, 3)), [0, 1, 1, 0], AttackConfig(steps=7), Rng(0), c)
    assert (c.full_forward, c.full_backward, c.first_layer_forward) == (7, 7, 0)


def test_pgd_near_grid_optimum():
    net = random_net(31, (2, 4, 2), scale=2.0)
    x, y = np.array([[0.2, -0.1]]), np.array([1])
    eps = 0.5
    cfg = AttackConfig(steps=20, step_size=eps / 4, epsilon=eps, init="zero")
    eta = pgd_attack(net, CE, x, y, cfg).eta
    got = float(CE.values(net(x + eta), y)[0])
    grid = np.linspace(-eps, eps, 201)
    G = np.stack(np.meshgrid(grid, grid, indexing="ij"), -1).reshape(-1, 2)
    best = float(CE.values(net(x + G), np.ones(len(G), dtype=int)).max())
    assert got >= 0.99 * best


def test_slack_identity_first_block():
    # with f0 = identity the slack is the plain output gradient of the loss
    from advgame.dynamics import LayerSpec, Network, pack_affine
    net = Network([LayerSpec.affine(2, 2), LayerSpec.affine(2, 2)],
                  [pack_affine(np.eye(2), np.zeros(2)), pack_affine([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])],
                  first_layer_len=1)
    x, y = np.array([[0.3, -0.2]]), np.array([1])
    s = compute_slack(net, NEG, x, y)
    assert np.array_equal(s.p, [[0.0, -1.0]] @ np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_slack_matches_fd():
    net = random_net(37, (3, 5, 4, 2))
    g = Rng(37).generator
    x, y = g.standard_normal((2, 3)), np.array([0, 1])
    s = compute_slack(net, CE, x, y)
    k0 = net.first_layer_len
    z = propagate(net, x, 0, k0)[-1]
    for i in range(2):
        f = lambda v: float(CE.values(propagate(net, v[None], k0)[-1], y[i:i + 1])[0])
        assert rel_err(s.p[i], finite_diff_grad(f, z[i])) <= 1e-6


def test_slack_is_scaled_costate():
    net = random_net(38, (3, 5, 4, 2))
    g = Rng(38).generator
    B = 4
    x, y = g.standard_normal((B, 3)), np.array([0, 1, 1, 0])
    s = compute_slack(net, CE, x, y)
    traj = forward_sweep(net, x)
    ps = backward_sweep(net, traj, terminal_costate(CE, traj.final, y, B), batch_size=B)
    assert rel_err(s.p, -B * ps[net.first_layer_len]) <= 1e-14


def test_yopo_one_one_equals_pgd_one():
    net = random_net(41, (3, 6, 4, 2))
    g = Rng(41).generator
    x, y = g.standard_normal((5, 3)), g.integers(0, 2, 5)
    cfg = AttackConfig(steps=1, step_size=0.05, epsilon=0.2, init="zero")
    pgd = pgd_attack(net, CE, x, y, cfg).eta
    s = compute_slack(net, CE, x, y)
    yopo = yopo_inner_loop(net, x, np.zeros_like(x), s.p, 1, 0.05, 0.2).eta
    assert np.max(np.abs(pgd - yopo)) <= 1e-12


def test_yopo_zero_slack_keeps_eta():
    net = random_net(42)
    eta0 = np.full((2, 3), 0.1)
    out = yopo_inner_loop(net, np.zeros((2, 3)), eta0, np.zeros((2, 5)), 4, 0.1, 0.3,
                          direction="raw_gradient").eta
    assert np.array_equal(out, eta0)


def test_yopo_rejects_bad_slack_shape():
    net = random_net(42)
    with pytest.raises(ShapeError):
        yopo_inner_loop(net, np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), 1, 0.1, 0.3)


@pytest.mark.parametrize("direction", ["sign", "raw_gradient"])
def test_yopo_equals_pgd_when_tail_is_affine(direction):
    # affine tail plus affine loss: the slack is constant in eta, so n inner
    # steps reproduce n full PGD steps
    net = random_net(43, (3, 6, 2))
    g = Rng(43).generator
    x, y = g.standard_normal((4, 3)), np.array([0, 1, 1, 0])
    n = 5
    cfg = AttackConfig(steps=n, step_size=0.04, epsilon=0.15, direction=direction, init="zero")
    pgd = pgd_attack(net, NEG, x, y, cfg).eta
    s = compute_slack(net, NEG, x, y)
    c = PropCounter()
    yopo = yopo_inner_loop(net, x, np.zeros_like(x), s.p, n, 0.04, 0.15, direction, counter=c).eta
    assert np.max(np.abs(pgd - yopo)) <= 1e-10
    assert (c.first_layer_forward, c.first_layer_backward, c.full_forward) == (n, n, 0)


def test_yopo_differs_from_pgd_for_nonlinear_tail():
    net = random_net(44, (3, 6, 6, 2), scale=2.0)
    g = Rng(44).generator
    x, y = g.standard_normal((4, 3)), np.array([0, 1, 1, 0])
    cfg = AttackConfig(steps=5, step_size=0.1, epsilon=0.5, direction="raw_gradient", init="zero")
    pgd = pgd_attack(net, CE, x, y, cfg).eta
    s = compute_slack(net, CE, x, y)
    yopo = yopo_inner_loop(net, x, np.zeros_like(x), s.p, 5, 0.1, 0.5, "raw_gradient").eta
    assert np.max(np.abs(pgd - yopo)) > 1e-6


def test_kl_zero_on_identical_logits():
    z = Rng(3).generator.standard_normal((4, 3))
    assert np.allclose(kl_consistency(z, z), 0.0, atol=1e-15)


def test_kl_gradients_fd():
    g = Rng(45).generator
    zc, za = g.standard_normal(3), g.standard_normal(3)
    fa = finite_diff_grad(lambda v: float(kl_consistency(zc[None], v[None])[0]), za)
    fc = finite_diff_grad(lambda v: float(kl_consistency(v[None], za[None])[0]), zc)
    assert rel_err(kl_grad_adv(zc[None], za[None])[0], fa) <= 1e-7
    assert rel_err(kl_grad_clean(zc[None], za[None])[0], fc) <= 1e-7


def test_trades_zero_steps_is_clean():
    net = random_net(46)
    x = Rng(46).generator.standard_normal((3, 3))
    xa = trades_attack(net, x, AttackConfig(steps=0, epsilon=0.3, init="zero"))
    assert np.array_equal(xa, x)
    assert np.allclose(kl_consistency(net(x), net(xa)), 0.0, atol=1e-15)


def test_trades_zero_epsilon():
    net = random_net(47)
    x = Rng(47).generator.standard_normal((3, 3))
    xa = trades_attack(net, x, AttackConfig(steps=4, step_size=0.1, epsilon=0.0), Rng(1))
    assert np.array_equal(xa, x)


def test_trades_step_comparison_logged():
    net = random_net(48, (3, 8, 3), scale=2.0)
    x = Rng(48).generator.standard_normal((16, 3))
    kl = {}
    for steps in (1, 10):
        xa = trades_attack(net, x, AttackConfig(steps=steps, step_size=0.03, epsilon=0.1), Rng(2))
        assert np.all(np.abs(xa - x) <= 0.1 + 1e-15)
        kl[steps] = float(kl_consistency(net(x), net(xa)).mean())
    # informational only: more steps usually, not provably, raise the KL
    print(f"trades KL: 1 step {kl[1]:.4g}, 10 steps {kl[10]:.4g}")


def test_trades_counts_stacked_sweep_once():
    net = random_net(49)
    c = PropCounter()
    trades_attack(net, np.zeros((2, 3)), AttackConfig(steps=3), Rng(0), c)
    assert (c.full_forward, c.full_backward) == (3, 3)
    c = PropCounter()
    s, zc = compute_consistency_slack(net, np.zeros((2, 3)), np.ones((2, 3)), counter=c)
    assert (c.full_forward, c.full_backward) == (1, 1) and zc.shape == (2, 2)
