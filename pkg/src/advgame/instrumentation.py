"""Propagation counting and the closed-form cost audit.

Counts are per minibatch sweep, not per example: pushing a whole minibatch
through every layer once is one full forward. A sweep through only the
first-layer block increments the first-layer counters and nothing else.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

CATEGORIES = ("full_forward", "full_backward", "first_layer_forward", "first_layer_backward")


@dataclass
class PropCounter:
    full_forward: int = 0
    full_backward: int = 0
    first_layer_forward: int = 0
    first_layer_backward: int = 0
    wall_ms: dict[str, float] = field(default_factory=dict)

    def tick(self, category: str, k: int = 1) -> None:
        if category not in CATEGORIES:
            raise KeyError(category)
        if k < 0:
            raise ValueError("counters never decrease")
        setattr(self, category, getattr(self, category) + k)

    @contextmanager
    def timed(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.wall_ms[phase] = self.wall_ms.get(phase, 0.0) + 1e3 * (time.perf_counter() - t0)

    def snapshot(self) -> dict[str, int]:
        return {c: getattr(self, c) for c in CATEGORIES}

    def diff(self, before: dict[str, int]) -> dict[str, int]:
        return {c: getattr(self, c) - before[c] for c in CATEGORIES}


def tick(counter: PropCounter | None, category: str) -> None:
    if counter is not None:
        counter.tick(category)


def expected_counts(method: str, minibatches: int, m: int = 1, n: int = 1, r: int = 1) -> dict[str, int]:
    """Closed-form propagation counts for ``minibatches`` training steps.

    ``full`` covers both forward and backward sweeps (always paired), and
    likewise ``first_layer``.
    """
    if method == "natural":
        full, first = 1, 0
    elif method in ("pgd", "trades"):
        full, first = r + 1, 0
    elif method in ("yopo", "trades_yopo"):
        full, first = m + 1, m * n
    elif method == "free":
        # input gradient comes straight out of each full backward
        full, first = m + 1, 0
    else:
        raise ValueError(f"unknown method {method!r}")
    return {
        "full_forward": full * minibatches,
        "full_backward": full * minibatches,
        "first_layer_forward": first * minibatches,
        "first_layer_backward": first * minibatches,
    }


@dataclass
class CountAudit:
    method: str
    minibatches: int
    expected: dict[str, int]
    observed: dict[str, int]
    passed: dict[str, bool]

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def count_report(counter: PropCounter, config, minibatches: int) -> CountAudit:
    """Compare observed counters against the closed forms for ``config.method``."""
    method = config.method
    exp = expected_counts(
        method, minibatches,
        m=getattr(config, "m", 1) or 1,
        n=getattr(config, "n", 1) or 1,
        r=getattr(config, "r", 1) or 1,
    )
    obs = counter.snapshot()
    return CountAudit(
        method=method,
        minibatches=minibatches,
        expected=exp,
        observed=obs,
        passed={c: exp[c] == obs[c] for c in CATEGORIES},
    )
