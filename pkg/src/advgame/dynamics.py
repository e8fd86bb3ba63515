"""Feed-forward networks viewed as a discrete-time dynamical system.

A network is a chain of layers ``x_{t+1} = f_t(x_t, theta_t)``. Affine
layers store their parameters as one flat vector ``[W.ravel(), b]`` so that
optimizers and perturbation samplers can treat every layer uniformly;
activation layers carry an empty parameter vector.

The first ``first_layer_len`` layers form the block ``f_0`` that the YOPO
inner loop propagates through; the rest of the chain is ``g``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .instrumentation import PropCounter, tick
from .numerics import Rng

ACTIVATIONS = ("tanh", "softplus", "relu")
CHECKPOINT_FORMAT = "advgame.network"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str | None = None

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.kind == "affine":
            if self.activation is not None:
                raise ValueError("affine layers take no activation name")
        elif self.kind == "activation":
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
            if self.in_dim != self.out_dim:
                raise ValueError("activation layers preserve dimension")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def n_params(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim if self.kind == "affine" else 0

    @classmethod
    def affine(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls("affine", in_dim, out_dim)

    @classmethod
    def act(cls, name: str, dim: int) -> "LayerSpec":
        return cls("activation", dim, dim, name)


def split_affine(layer: LayerSpec, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Views ``(W, b)`` into a flat affine parameter vector."""
    k = layer.out_dim * layer.in_dim
    return theta[:k].reshape(layer.out_dim, layer.in_dim), theta[k:]


def pack_affine(W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(W, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()])


def _check(layer: LayerSpec, theta: np.ndarray, x: np.ndarray, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ShapeError(f"{what} has trailing dim {x.shape[-1]}, layer expects {dim}")
    if theta.shape != (layer.n_params,):
        raise ShapeError(f"parameter vector has shape {theta.shape}, layer expects ({layer.n_params},)")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    return np.maximum(x, 0.0)


def _act_prime(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic sigmoid without overflow
    # subgradient at exactly 0 is taken as 0
    return (x > 0.0).astype(np.float64)


def layer_forward(layer: LayerSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    _check(layer, theta, x, layer.in_dim, "input")
    if layer.kind == "affine":
        W, b = split_affine(layer, theta)
        return x @ W.T + b
    return _act(layer.activation, x)


def jvp_x(layer: LayerSpec, theta: np.ndarray, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Forward-mode product ``J_x f(x) @ dx``."""
    _check(layer, theta, x, layer.in_dim, "input")
    if layer.kind == "affine":
        W, _ = split_affine(layer, theta)
        return dx @ W.T
    return _act_prime(layer.activation, x) * dx


def vjp_x(layer: LayerSpec, theta: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``J_x f(x)^T v``; batched inputs are handled row by row."""
    _check(layer, theta, x, layer.in_dim, "input")
    _check(layer, theta, v, layer.out_dim, "cotangent")
    if layer.kind == "affine":
        W, _ = split_affine(layer, theta)
        return v @ W
    return v * _act_prime(layer.activation, x)


def vjp_theta(layer: LayerSpec, theta: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``J_theta f(x)^T v`` as a flat vector, summed over the batch axis if present."""
    _check(layer, theta, x, layer.in_dim, "input")
    _check(layer, theta, v, layer.out_dim, "cotangent")
    if layer.kind != "affine":
        return np.zeros(0)
    if x.ndim == 1:
        return pack_affine(np.outer(v, x), v)
    return pack_affine(v.T @ x, v.sum(axis=0))


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[np.ndarray]
    first_layer_len: int = 2
    seed_lineage: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if len(self.params) != len(self.layers):
            raise ValueError("one parameter vector per layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
        for layer, p in zip(self.layers, self.params):
            if p.shape != (layer.n_params,):
                raise ShapeError(f"parameter vector {p.shape} does not fit {layer}")
        if not 1 <= self.first_layer_len <= len(self.layers):
            raise ValueError("first_layer_len must lie in [1, T]")

    @property
    def T(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Network":
        return Network(list(self.layers), [p.copy() for p in self.params],
                       self.first_layer_len, list(self.seed_lineage))

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        return Network(list(self.layers), [np.array(p, dtype=np.float64) for p in params],
                       self.first_layer_len, list(self.seed_lineage))

    def flat_params(self) -> np.ndarray:
        return np.concatenate(self.params) if self.params else np.zeros(0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return propagate(self, x)[-1]


def init_mlp(widths: Sequence[int], activation: str = "tanh", seed: int = 0,
             first_layer_len: int = 2) -> Network:
    """Affine/activation stack with Glorot-uniform weights and zero biases.

    ``widths = [d_in, h_1, ..., d_out]``; no activation follows the last
    affine layer, so the output is a logit vector.
    """
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = Rng(seed)
    layers: list[LayerSpec] = []
    params: list[np.ndarray] = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        lim = np.sqrt(6.0 / (a + b))
        W = rng.generator.uniform(-lim, lim, size=(b, a))
        layers.append(LayerSpec.affine(a, b))
        params.append(pack_affine(W, np.zeros(b)))
        if i < len(widths) - 2:
            layers.append(LayerSpec.act(activation, b))
            params.append(np.zeros(0))
    return Network(layers, params, min(first_layer_len, len(layers)), [seed])


@dataclass
class Trajectory:
    """States ``x_t`` for t = 0..T; each entry has shape ``(batch, d_t)``."""

    states: list[np.ndarray]

    @property
    def T(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def propagate(net: Network, x: np.ndarray, lo: int = 0, hi: int | None = None) -> list[np.ndarray]:
    """Uncounted forward pass through layers ``lo..hi-1``; returns all intermediate states."""
    hi = net.T if hi is None else hi
    states = [np.asarray(x, dtype=np.float64)]
    for t in range(lo, hi):
        states.append(layer_forward(net.layers[t], net.params[t], states[-1]))
    return states


def pullback(net: Network, states: Sequence[np.ndarray], g: np.ndarray,
             lo: int = 0, hi: int | None = None) -> list[np.ndarray]:
    """Uncounted reverse sweep of cotangent ``g`` from ``x_hi`` to ``x_lo``.

    ``states[k]`` must be ``x_{lo+k}``. Returns cotangents for ``x_lo..x_hi``.
    """
    hi = net.T if hi is None else hi
    out = [None] * (hi - lo + 1)
    out[-1] = g
    for t in range(hi - 1, lo - 1, -1):
        k = t - lo
        out[k] = vjp_x(net.layers[t], net.params[t], states[k], out[k + 1])
    return out


def forward_sweep(net: Network, x0: np.ndarray, counter: PropCounter | None = None) -> Trajectory:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[1] != net.in_dim:
        raise ShapeError(f"input dim {x0.shape[1]} != network input dim {net.in_dim}")
    traj = Trajectory(propagate(net, x0))
    tick(counter, "full_forward")
    return traj


def param_grads(net: Network, states: Sequence[np.ndarray], cotangents: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Per-layer ``sum_i J_theta f_t(x_{i,t})^T g_{i,t+1}``."""
    return [vjp_theta(net.layers[t], net.params[t], states[t], cotangents[t + 1]) for t in range(net.T)]


# -- checkpoints -------------------------------------------------------------

def network_to_dict(net: Network) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "first_layer_len": net.first_layer_len,
        "seed_lineage": list(net.seed_lineage),
        "layers": [
            {"kind": l.kind, "in_dim": l.in_dim, "out_dim": l.out_dim, "activation": l.activation}
            for l in net.layers
        ],
        # json writes floats with repr, which round-trips float64 exactly
        "params": [p.tolist() for p in net.params],
    }


def network_from_dict(d: dict) -> Network:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a network checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    layers = [LayerSpec(l["kind"], l["in_dim"], l["out_dim"], l.get("activation")) for l in d["layers"]]
    params = [np.asarray(p, dtype=np.float64) for p in d["params"]]
    return Network(layers, params, d["first_layer_len"], list(d.get("seed_lineage", [])))


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def load_network(path: str | Path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))
