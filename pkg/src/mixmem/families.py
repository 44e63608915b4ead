"""Exponential-family edge distributions for weighted network layers.

Every family is indexed by its mean ``mu`` and written in the form

    f(x; mu) = h(x) * exp{ eta(mu) * x - B(mu) },

with the cumulant tied to the natural parameter by ``B'(mu) = mu * eta'(mu)``,
so that ``E[X] = mu`` and ``Var(X) = 1 / eta'(mu)``.

Supported families (all integer-valued, symmetric-network edge weights):

* ``bernoulli``    eta = logit(mu),          B = -log(1 - mu),       h = 1
* ``poisson``      eta = log(mu),            B = mu,                 h = 1/x!
* ``negbinomial``  eta = log(mu/(mu+rho)),   B = rho*log((mu+rho)/rho),
                   h = Gamma(x+rho) / (Gamma(rho) * x!)   (dispersion rho > 0)

The negative binomial has ``Var(X) = mu + mu^2/rho`` and may carry one
dispersion per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

BERNOULLI = "bernoulli"
POISSON = "poisson"
NEGBINOMIAL = "negbinomial"
KINDS = (BERNOULLI, POISSON, NEGBINOMIAL)

# Integer codes used by compiled numerical kernels.
FAMILY_CODES = {BERNOULLI: 0, POISSON: 1, NEGBINOMIAL: 2}

#: Default mean interval for Bernoulli layers.
BERNOULLI_INTERVAL = (0.01, 0.99)
#: Default lower mean bound for count families; the upper bound is data-driven.
COUNT_LOWER = 0.05
COUNT_UPPER_FACTOR = 1.5


class DomainError(ValueError):
    """Raised when a mean or observation lies outside the family's domain."""


@dataclass(frozen=True)
class EdgeFamily:
    """An edge-weight distribution family plus its working mean interval.

    ``interval`` is the closed interval I = [lo, hi] that all model means are
    assumed to live in; generation validates means against it and the
    likelihood machinery clips means into its interior.
    ``dispersion`` is only meaningful for ``negbinomial``: a scalar applied to
    every layer or an array with one value per layer.
    """

    kind: str
    interval: tuple[float, float] = (0.0, np.inf)
    dispersion: float | np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {KINDS}")
        lo, hi = self.interval
        if not (0.0 <= lo < hi):
            raise ValueError(f"invalid mean interval {self.interval}")
        if self.kind == BERNOULLI and hi > 1.0:
            raise ValueError("bernoulli mean interval must sit inside [0, 1]")
        if self.kind == NEGBINOMIAL:
            if self.dispersion is None:
                raise ValueError("negbinomial requires a dispersion")
            rho = np.atleast_1d(np.asarray(self.dispersion, dtype=np.float64))
            if np.any(rho <= 0) or not np.all(np.isfinite(rho)):
                raise ValueError("negbinomial dispersion must be finite and > 0")
        elif self.dispersion is not None:
            raise ValueError(f"{self.kind} does not take a dispersion")

    @property
    def code(self) -> int:
        return FAMILY_CODES[self.kind]

    def rho(self, layer: int = 0) -> float:
        """Dispersion for one layer (1.0 placeholder for non-NB families)."""
        if self.kind != NEGBINOMIAL:
            return 1.0
        rho = np.atleast_1d(np.asarray(self.dispersion, dtype=np.float64))
        return float(rho[layer]) if rho.size > 1 else float(rho[0])

    def rho_vector(self, m: int) -> np.ndarray:
        """Per-layer dispersion vector of length ``m``."""
        if self.kind != NEGBINOMIAL:
            return np.ones(m)
        rho = np.atleast_1d(np.asarray(self.dispersion, dtype=np.float64))
        if rho.size == 1:
            return np.full(m, float(rho[0]))
        if rho.size != m:
            raise ValueError(f"got {rho.size} dispersions for {m} layers")
        return rho.astype(np.float64)

    def with_interval(self, interval: tuple[float, float]) -> "EdgeFamily":
        return replace(self, interval=(float(interval[0]), float(interval[1])))


def default_interval(kind: str, mean_upper: float | None = None) -> tuple[float, float]:
    """Default working interval: fixed for Bernoulli, data-driven for counts."""
    if kind == BERNOULLI:
        return BERNOULLI_INTERVAL
    if mean_upper is None or not np.isfinite(mean_upper) or mean_upper <= 0:
        raise ValueError("count families need a positive mean upper bound")
    return (COUNT_LOWER, COUNT_UPPER_FACTOR * float(mean_upper))


def _check_mu(mu: np.ndarray, fam: EdgeFamily) -> None:
    if np.any(~np.isfinite(mu)) or np.any(mu <= 0.0):
        raise DomainError(f"{fam.kind} mean must be finite and > 0")
    if fam.kind == BERNOULLI and np.any(mu >= 1.0):
        raise DomainError("bernoulli mean must be < 1")


def _check_x(x: np.ndarray, fam: EdgeFamily) -> None:
    if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x != np.floor(x)):
        raise DomainError(f"{fam.kind} observations must be nonnegative integers")
    if fam.kind == BERNOULLI and np.any(x > 1):
        raise DomainError("bernoulli observations must lie in {0, 1}")


def eta(mu, fam: EdgeFamily, layer: int = 0) -> np.ndarray:
    """Natural parameter eta(mu)."""
    mu = np.asarray(mu, dtype=np.float64)
    _check_mu(mu, fam)
    if fam.kind == BERNOULLI:
        return np.log(mu / (1.0 - mu))
    if fam.kind == POISSON:
        return np.log(mu)
    rho = fam.rho(layer)
    return np.log(mu / (mu + rho))


def eta_prime(mu, fam: EdgeFamily, layer: int = 0) -> np.ndarray:
    """eta'(mu); also the reciprocal variance at mean mu."""
    mu = np.asarray(mu, dtype=np.float64)
    _check_mu(mu, fam)
    if fam.kind == BERNOULLI:
        return 1.0 / (mu * (1.0 - mu))
    if fam.kind == POISSON:
        return 1.0 / mu
    rho = fam.rho(layer)
    return rho / (mu * (mu + rho))


def cumulant(mu, fam: EdgeFamily, layer: int = 0) -> np.ndarray:
    """Cumulant B(mu), normalized so f integrates to one."""
    mu = np.asarray(mu, dtype=np.float64)
    _check_mu(mu, fam)
    if fam.kind == BERNOULLI:
        return -np.log1p(-mu)
    if fam.kind == POISSON:
        return mu
    rho = fam.rho(layer)
    return rho * np.log((mu + rho) / rho)


def log_h(x, fam: EdgeFamily, layer: int = 0) -> np.ndarray:
    """log of the carrier measure h(x)."""
    x = np.asarray(x, dtype=np.float64)
    _check_x(x, fam)
    if fam.kind == BERNOULLI:
        return np.zeros_like(x)
    if fam.kind == POISSON:
        return -gammaln(x + 1.0)
    rho = fam.rho(layer)
    return gammaln(x + rho) - gammaln(rho) - gammaln(x + 1.0)


def log_density(x, mu, fam: EdgeFamily, layer: int = 0) -> np.ndarray:
    """log f(x; mu) evaluated elementwise (broadcasting x against mu)."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return log_h(x, fam, layer) + eta(mu, fam, layer) * x - cumulant(mu, fam, layer)


def variance(mu, fam: EdgeFamily, layer: int = 0) -> np.ndarray:
    """Var(X) at mean mu; equals 1/eta'(mu)."""
    return 1.0 / eta_prime(mu, fam, layer)


def sample(mu, fam: EdgeFamily, rng: np.random.Generator, layer: int = 0) -> np.ndarray:
    """Draw one observation per entry of ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    _check_mu(mu, fam)
    if fam.kind == BERNOULLI:
        return (rng.random(mu.shape) < mu).astype(np.float64)
    if fam.kind == POISSON:
        return rng.poisson(mu).astype(np.float64)
    rho = fam.rho(layer)
    return rng.negative_binomial(rho, rho / (rho + mu)).astype(np.float64)
