import numpy as np
import pytest

from advgame.dynamics import LayerSpec, Network, init_mlp, pack_affine
from advgame.numerics import Rng

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def random_net(seed, widths=(3, 5, 4, 2), activation="tanh", first_layer_len=2, scale=1.0):
    """MLP with non-zero random biases so every code path is exercised."""
    net = init_mlp(list(widths), activation, seed, first_layer_len)
    g = Rng(seed).child(99).generator
    params = []
    for layer, p in zip(net.layers, net.params):
        if layer.kind == "affine":
            W = scale * g.standard_normal((layer.out_dim, layer.in_dim)) / np.sqrt(layer.in_dim)
            b = 0.3 * g.standard_normal(layer.out_dim)
            p = pack_affine(W, b)
        params.append(p)
    return net.with_params(params)


def random_widths(g, max_layers=2, max_width=16, d_in=None, d_out=None):
    hidden = list(g.integers(1, max_width + 1, size=g.integers(0, max_layers + 1)))
    d_in = d_in or int(g.integers(1, max_width + 1))
    d_out = d_out or int(g.integers(2, 6))
    return [d_in, *map(int, hidden), d_out]


def affine_net(W, b):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    layer = LayerSpec.affine(W.shape[1], W.shape[0])
    return Network([layer], [pack_affine(W, b)], first_layer_len=1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return Rng(1234)
