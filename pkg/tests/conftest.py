"""Shared fixtures: small synthetic networks and their spectral estimates.

Session-scoped fixtures cache the expensive pieces (network generation and
spectral estimation) so unit tests across files can reuse them.
"""

from __future__ import annotations

import numpy as np
import pytest

from mixmem.generate import experiment_params, sample_network
from mixmem.spectral import estimate


@pytest.fixture(scope="session")
def small_case():
    """Experiment-1 Poisson data at a size small enough for unit tests."""
    params = experiment_params(1, n=120, m=3, d=3, seed=42)
    net = sample_network(params, seed=42)
    est = estimate(net, d=3)
    return params, net, est


@pytest.fixture(scope="session")
def bernoulli_case():
    params = experiment_params(3, n=120, m=3, d=3, seed=7)
    net = sample_network(params, seed=7, clip_means=True)
    est = estimate(net, d=3)
    return params, net, est


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
