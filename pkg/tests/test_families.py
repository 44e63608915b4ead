"""Edge-weight families: densities against scipy, identities, and sampling."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from mixmem.families import (
    BERNOULLI,
    BERNOULLI_INTERVAL,
    COUNT_LOWER,
    COUNT_UPPER_FACTOR,
    DomainError,
    EdgeFamily,
    NEGBINOMIAL,
    POISSON,
    cumulant,
    default_interval,
    eta,
    eta_prime,
    log_density,
    log_h,
    sample,
    variance,
)

BERN = EdgeFamily(BERNOULLI, (0.01, 0.99))
POIS = EdgeFamily(POISSON, (0.05, 3.0))
NB2 = EdgeFamily(NEGBINOMIAL, (0.05, 3.0), dispersion=2.0)


def test_log_density_matches_scipy_poisson():
    x = np.arange(0, 12, dtype=float)
    for mu in [0.07, 0.5, 1.3, 2.9]:
        mine = log_density(x, np.full_like(x, mu), POIS)
        ref = stats.poisson.logpmf(x, mu)
        np.testing.assert_allclose(mine, ref, rtol=1e-12)


def test_log_density_matches_scipy_bernoulli():
    x = np.array([0.0, 1.0, 0.0, 1.0])
    mu = np.array([0.02, 0.02, 0.9, 0.9])
    mine = log_density(x, mu, BERN)
    ref = stats.bernoulli.logpmf(x.astype(int), mu)
    np.testing.assert_allclose(mine, ref, rtol=1e-12)


def test_log_density_matches_scipy_negative_binomial():
    # scipy's nbinom(r, p) counts failures before r successes with success
    # probability p; mean mu corresponds to p = rho / (mu + rho).
    x = np.arange(0, 15, dtype=float)
    for rho in [0.5, 2.0, 7.0]:
        fam = EdgeFamily(NEGBINOMIAL, (0.05, 3.0), dispersion=rho)
        for mu in [0.1, 0.8, 2.5]:
            mine = log_density(x, np.full_like(x, mu), fam)
            ref = stats.nbinom.logpmf(x.astype(int), rho, rho / (mu + rho))
            np.testing.assert_allclose(mine, ref, rtol=1e-10)


def test_log_density_normalizes_over_support():
    x = np.arange(0, 200, dtype=float)
    for fam, mus in [(POIS, [0.05, 1.0, 2.9]), (NB2, [0.05, 1.0, 2.9]), (BERN, [0.01, 0.5, 0.99])]:
        support = x if fam.kind != BERNOULLI else np.array([0.0, 1.0])
        for mu in mus:
            total = np.exp(log_density(support, np.full_like(support, mu), fam)).sum()
            assert total == pytest.approx(1.0, abs=1e-8)


def test_mean_identity_on_truncated_support():
    x = np.arange(0, 400, dtype=float)
    for fam in [POIS, NB2]:
        for mu in [0.05, 0.7, 2.9]:
            probs = np.exp(log_density(x, np.full_like(x, mu), fam))
            assert (x * probs).sum() == pytest.approx(mu, abs=1e-6)


def test_density_decomposes_into_exponential_family_parts():
    # log f(x; mu) = eta(mu) x - b(mu) + log h(x) for every family
    x = np.arange(0, 6, dtype=float)
    for fam in [BERN, POIS, NB2]:
        support = x if fam.kind != BERNOULLI else np.array([0.0, 1.0])
        mu = np.full_like(support, 0.4)
        recomposed = eta(mu, fam) * support - cumulant(mu, fam) + log_h(support, fam)
        np.testing.assert_allclose(recomposed, log_density(support, mu, fam), rtol=1e-12)


def test_eta_prime_matches_finite_differences():
    h = 1e-7
    mus = np.array([0.08, 0.5, 1.7])
    for fam in [BERN, POIS, NB2]:
        mu = mus if fam.kind != BERNOULLI else np.array([0.08, 0.5, 0.9])
        fd = (eta(mu + h, fam) - eta(mu - h, fam)) / (2 * h)
        np.testing.assert_allclose(eta_prime(mu, fam), fd, rtol=1e-6)


def test_eta_prime_is_inverse_variance():
    # canonical exponential family: d eta / d mu = 1 / Var(X)
    for fam in [BERN, POIS, NB2]:
        mu = np.array([0.1, 0.45, 0.9])
        np.testing.assert_allclose(eta_prime(mu, fam) * variance(mu, fam), 1.0, rtol=1e-12)


def test_variance_matches_known_formulas():
    mu = np.array([0.2, 0.8])
    np.testing.assert_allclose(variance(mu, POIS), mu, rtol=0)
    np.testing.assert_allclose(variance(mu, BERN), mu * (1 - mu), rtol=1e-15)
    np.testing.assert_allclose(variance(mu, NB2), mu + mu**2 / 2.0, rtol=1e-15)


def test_sampling_moments_match_family():
    rng = np.random.default_rng(11)
    n = 200_000
    for fam in [BERN, POIS, NB2]:
        mu = 0.6 if fam.kind != BERNOULLI else 0.3
        draws = sample(np.full(n, mu), fam, rng)
        se_mean = np.sqrt(float(variance(np.array([mu]), fam)[0]) / n)
        assert draws.mean() == pytest.approx(mu, abs=5 * se_mean)
        assert draws.var() == pytest.approx(float(variance(np.array([mu]), fam)[0]), rel=0.05)


def test_per_layer_dispersions():
    fam = EdgeFamily(NEGBINOMIAL, (0.05, 3.0), dispersion=np.array([1.0, 2.0, 4.0]))
    np.testing.assert_allclose(fam.rho_vector(3), [1.0, 2.0, 4.0])
    assert fam.rho(2) == 4.0
    x = np.array([3.0])
    mu = np.array([0.5])
    # layer-specific density equals a scalar-dispersion family of that layer
    for t, rho in enumerate([1.0, 2.0, 4.0]):
        one = EdgeFamily(NEGBINOMIAL, (0.05, 3.0), dispersion=rho)
        np.testing.assert_allclose(log_density(x, mu, fam, layer=t), log_density(x, mu, one), rtol=1e-14)


def test_default_intervals():
    assert default_interval(BERNOULLI) == BERNOULLI_INTERVAL
    lo, hi = default_interval(POISSON, mean_upper=2.0)
    assert lo == COUNT_LOWER and hi == pytest.approx(COUNT_UPPER_FACTOR * 2.0)
    with pytest.raises(ValueError):
        default_interval(POISSON)


def test_family_validation_errors():
    with pytest.raises(ValueError):
        EdgeFamily("gamma")
    with pytest.raises(ValueError):
        EdgeFamily(BERNOULLI, (0.1, 1.5))
    with pytest.raises(ValueError):
        EdgeFamily(NEGBINOMIAL, (0.05, 2.0))  # missing dispersion
    with pytest.raises(ValueError):
        EdgeFamily(NEGBINOMIAL, (0.05, 2.0), dispersion=-1.0)
    with pytest.raises(ValueError):
        EdgeFamily(POISSON, (0.05, 2.0), dispersion=2.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        eta(np.array([-0.1]), POIS)
    with pytest.raises(DomainError):
        eta(np.array([1.2]), BERN)
    with pytest.raises(DomainError):
        log_density(np.array([2.0]), np.array([0.5]), BERN)
    with pytest.raises(DomainError):
        log_density(np.array([1.5]), np.array([0.5]), POIS)


def test_codes_are_stable():
    assert (BERN.code, POIS.code, NB2.code) == (0, 1, 2)
