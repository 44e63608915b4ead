"""Point estimates, per-vertex credible regions, and coverage checks.

Point estimates back-transform the variational means: z_hat = kappa(T_z(mu1)),
theta_hat = T_theta(mu2).  The level-(1-alpha) credible region for vertex i is
the x-space ellipsoid

    {x : (x - mu1)^T Sigma_x^{-1} (x - mu1) <= chi2_{d-1}(1 - alpha)},

with Sigma_x = L L^T / (mn); its image under kappa(T_z(.)) is the simplex
region.  Because the map is a bijection onto the open simplex, "the truth is
inside the simplex region" and "the transformed truth is inside the ellipsoid"
are the same event, and the ellipsoid check is exact — no Monte Carlo is
needed for coverage.  Monte-Carlo simplex draws are still provided for
visualization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import transforms
from ._util import NS_CREDIBLE, derive_rng
from .spectral import best_column_permutation
from .vi import FitResults, VariationalPosterior

#: Ridge scale applied when the x-covariance is numerically singular.
_COV_RIDGE = 1e-12

#: Interior threshold defining "mixed" vertices for coverage evaluation.
MIXED_THRESHOLD = 0.05


def point_estimates(fit: FitResults) -> tuple[np.ndarray, np.ndarray]:
    """(Z_hat, Theta_hat) from fitted posteriors; failed vertices become NaN."""
    n = fit.n
    post0 = next((p for p in fit.posteriors if p is not None), None)
    if post0 is None:
        raise ValueError("no successful fits to summarize")
    d, m = post0.d, post0.m
    Z = np.full((n, d), np.nan)
    Theta = np.full((n, m), np.nan)
    for i, post in enumerate(fit.posteriors):
        if post is None:
            continue
        Z[i] = transforms.free_to_membership(post.mu1)
        Theta[i] = transforms.real_to_interval(post.mu2, fit.interval)
    return Z, Theta


@dataclass
class CredibleSummary:
    """Level-(1-alpha) credible region for one vertex's membership profile."""

    vertex: int
    z_hat: np.ndarray          # (d,) membership point estimate
    center: np.ndarray         # (d-1,) x-space ellipsoid center (= mu1)
    cov_x: np.ndarray          # (d-1, d-1) x-space covariance
    alpha: float
    radius2: float             # chi-square quantile defining the ellipsoid
    samples: np.ndarray | None = None   # (N_s, d) Monte-Carlo simplex draws
    flags: list[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.z_hat.size

    def mahalanobis2(self, z0: np.ndarray) -> float:
        """Squared Mahalanobis distance of a membership profile's x-image."""
        x0, _ = transforms.membership_to_free(np.asarray(z0, dtype=np.float64))
        return self.mahalanobis2_x(np.atleast_1d(x0))

    def mahalanobis2_x(self, x0: np.ndarray) -> float:
        diff = np.asarray(x0, dtype=np.float64) - self.center
        return float(diff @ np.linalg.solve(self.cov_x, diff))

    def covers(self, z0: np.ndarray) -> bool:
        """True iff the true profile's x-image lies inside the ellipsoid."""
        return self.mahalanobis2(z0) <= self.radius2

    def contains_x(self, x0: np.ndarray) -> bool:
        return self.mahalanobis2_x(x0) <= self.radius2


def credible_region(
    post: VariationalPosterior,
    alpha: float = 0.05,
    n_samples: int = 0,
    seed: int = 0,
) -> CredibleSummary:
    """Build the per-vertex credible region, optionally with simplex draws."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    k = post.d - 1
    cov = post.x_covariance()
    flags: list[str] = []
    ridge = _COV_RIDGE * max(float(np.trace(cov)) / k, 1e-300)
    for _ in range(8):
        try:
            np.linalg.cholesky(cov)
            break
        except np.linalg.LinAlgError:
            cov = cov + ridge * np.eye(k)
            ridge *= 10.0
            flags.append("covariance_ridged")
    radius2 = float(chi2.ppf(1.0 - alpha, df=k))
    z_hat = transforms.free_to_membership(post.mu1)
    samples = None
    if n_samples > 0:
        rng = derive_rng(seed, NS_CREDIBLE, post.vertex)
        X, _ = post.draw(n_samples, rng)
        samples = np.vstack([transforms.free_to_membership(x) for x in X])
    return CredibleSummary(
        vertex=post.vertex, z_hat=z_hat, center=post.mu1.copy(), cov_x=cov,
        alpha=alpha, radius2=radius2, samples=samples, flags=flags,
    )


def mixed_mask(Z: np.ndarray, threshold: float = MIXED_THRESHOLD) -> np.ndarray:
    """Vertices whose smallest membership weight is at least ``threshold``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return Z.min(axis=1) >= threshold


def align_to_truth(Z_est: np.ndarray, Z_true: np.ndarray) -> tuple[int, ...]:
    """Column permutation pi minimizing ||Z_est[:, pi] - Z_true||_F."""
    return best_column_permutation(np.asarray(Z_est), np.asarray(Z_true))


def truth_in_estimate_labels(z0: np.ndarray, perm: tuple[int, ...]) -> np.ndarray:
    """Re-express a true profile in the estimate's community labels.

    ``perm`` satisfies Z_est[:, perm] ~ Z_true, so truth column c corresponds
    to estimate column perm[c].
    """
    z0 = np.asarray(z0, dtype=np.float64)
    out = np.empty_like(z0)
    out[list(perm)] = z0
    return out


def alignment_error(Z_est: np.ndarray, Z_true: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Squared Frobenius error after the best column alignment."""
    perm = align_to_truth(Z_est, Z_true)
    diff = np.asarray(Z_est)[:, list(perm)] - np.asarray(Z_true)
    return float(np.sum(diff * diff)), perm
