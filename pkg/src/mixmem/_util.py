"""Shared helpers: deterministic RNG stream derivation and small numerics."""

from __future__ import annotations

import numpy as np

# Namespaces for derived random streams.  Every stochastic component of the
# library draws from a stream keyed by (seed, namespace, index...) so that
# results are reproducible and independent of execution order / thread count.
NS_PARAMS = 0
NS_LAYER = 1
NS_VERTEX = 2
NS_REPLICATE = 3
NS_CREDIBLE = 4
NS_HUNT = 5


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """Integer sub-seed for handing to components that take a seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {a.shape}")
    return a


def format_float(x: float) -> str:
    """17-significant-digit decimal rendering (round-trips float64 exactly)."""
    return f"{float(x):.17g}"
