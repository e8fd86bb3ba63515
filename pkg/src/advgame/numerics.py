"""Array helpers, seeded randomness and the finite-difference oracle.

Every array in this package is a float64 ``numpy.ndarray``. Batched states
are laid out as ``(batch, dim)``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_FD_STEP = 1e-5


class EvaluationError(ArithmeticError):
    """A probed function returned a non-finite value."""


class Rng:
    """Seeded random stream with deterministic child streams.

    Backed by numpy's PCG64. ``child(key)`` derives an independent stream
    from ``SeedSequence(seed, spawn_key=path + (key,))``, so a child depends
    only on the root seed and the key path, never on how much the parent
    has been consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def sample_uniform(rng: Rng, shape: Sequence[int] | int, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"empty interval: lo={lo} > hi={hi}")
    # lo == hi still draws, so the stream advances identically for every radius
    return rng.generator.uniform(lo, hi, size=shape)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(i) for i in np.unravel_index(k, x.shape)) if x.ndim else ()
            raise EvaluationError(f"non-finite function value probing coordinate {idx}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def directional_diff(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, direction: np.ndarray,
    h: float = DEFAULT_FD_STEP,
) -> np.ndarray:
    """Central-difference estimate of J_f(x) @ direction for a vector-valued f."""
    return (np.asarray(f(x + h * direction)) - np.asarray(f(x - h * direction))) / (2.0 * h)


def rel_err(a, b) -> float:
    """``max|a - b| / max(1, max|b|)``, the error measure used by all checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))
