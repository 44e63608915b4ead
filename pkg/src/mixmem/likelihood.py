"""Per-vertex spectral-assisted likelihood, Fisher blocks, and dispersion.

For vertex i the likelihood treats every other vertex's parameters as known,
substituting the spectral preliminary estimates: with assist vectors
y_j^(t) = B^(t) z_j theta_j^(t) built from those estimates, the i-th row of
layer t has mean theta_i^(t) * z_i^T y_j^(t), and

    loglik_i(z*, theta) = sum_t sum_j log f(A_ij^(t); theta^(t) kappa(z*)^T y_j^(t)),

with means clipped into the interior of the working interval (clipped terms
are constants: they contribute value but no gradient).  The same quantities
evaluated in free coordinates (x, nu) = (T_z^{-1}, T_theta^{-1}) give the
objective optimized by the variational fit.

The per-vertex empirical Fisher blocks have an arrow structure: a dense
membership block, one cross column per layer, and a diagonal degree block.
``structured_factor`` recovers the triangular-times-diagonal factorization of
the inverse that the variational family mirrors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from . import families, transforms
from ._kernels import loglik_batch
from .generate import MultilayerNetwork
from .spectral import SpectralEstimate, assist_vectors

#: Means are clipped into [lo + CLIP_MARGIN, hi - CLIP_MARGIN].
CLIP_MARGIN = 1e-9
#: Ridge scale for non-positive-definite curvature blocks.
RIDGE_SCALE = 1e-8

PriorPair = tuple[Callable[[np.ndarray], float], Callable[[np.ndarray], np.ndarray]]


@dataclass
class VertexProblem:
    """Everything needed to evaluate one vertex's assisted likelihood."""

    i: int
    A: np.ndarray              # (m, n) data rows of vertex i per layer
    Yt: np.ndarray             # (m, d, n) assist vectors, transposed layout
    family: families.EdgeFamily
    interval: tuple[float, float]
    rho: np.ndarray            # (m,) per-layer dispersions (ones if unused)
    logh_const: float          # sum over (t, j) of log h(A_ij)
    nz_ptr: np.ndarray         # (m+1,) CSR offsets of nonzero entries
    nz_idx: np.ndarray         # flattened nonzero column indices
    x0: np.ndarray | None = None    # init free membership coordinates
    nu0: np.ndarray | None = None   # init free degree coordinates
    L0: np.ndarray | None = None    # init triangular scale (d-1, d-1)
    prior_x: PriorPair | None = None   # None -> uniform-membership induced prior
    prior_nu: PriorPair | None = None  # None -> uniform-degree induced prior
    flags: list[str] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.Yt.shape[1]

    @property
    def clip_bounds(self) -> tuple[float, float]:
        lo, hi = self.interval
        return lo + CLIP_MARGIN, hi - CLIP_MARGIN

    @property
    def scale(self) -> float:
        """1/sqrt(mn) reparameterization scale (unit for empty problems)."""
        mn = self.m * self.n
        return 1.0 / math.sqrt(mn) if mn > 0 else 1.0


def uniform_prior_x(d: int) -> PriorPair:
    """Prior on x induced by the uniform distribution on the simplex.

    log pi_x(x) = log((d-1)!) + log |det dT_z/dx|.
    """
    k = d - 1
    const = math.lgamma(d)

    def logpdf(x: np.ndarray) -> float:
        return const + float(transforms.stick_log_jacobian(x))

    def grad(x: np.ndarray) -> np.ndarray:
        s = transforms.sigmoid(x)
        weights = (k - 1.0) - np.arange(k)
        return 1.0 - 2.0 * s + weights * (1.0 - s)

    return logpdf, grad


def uniform_prior_nu(m: int) -> PriorPair:
    """Prior on nu induced by uniform degree corrections on the interval.

    The interval length cancels against the Jacobian, leaving
    log pi_nu(nu) = sum_t [log sigmoid(nu_t) + log(1 - sigmoid(nu_t))].
    """

    def logpdf(nu: np.ndarray) -> float:
        s = transforms.sigmoid(nu)
        return float((np.log(s) + np.log1p(-s)).sum())

    def grad(nu: np.ndarray) -> np.ndarray:
        return 1.0 - 2.0 * transforms.sigmoid(nu)

    return logpdf, grad


def build_vertex_problem(
    network: MultilayerNetwork,
    est: SpectralEstimate,
    i: int,
    *,
    interval: tuple[float, float] | None = None,
    L_init: np.ndarray | None = None,
    prior_x: PriorPair | None = None,
    prior_nu: PriorPair | None = None,
    _Y: np.ndarray | None = None,
) -> VertexProblem:
    """Assemble the assisted-likelihood problem for vertex i."""
    fam = network.family
    interval = tuple(interval) if interval is not None else tuple(est.interval)
    Y = assist_vectors(est) if _Y is None else _Y
    m, n = network.m, network.n
    A = np.ascontiguousarray(network.layers[:, i, :])
    Yt = np.ascontiguousarray(np.swapaxes(Y, 1, 2))  # (m, d, n)
    rho = fam.rho_vector(m)
    logh = 0.0
    nz_ptr = np.zeros(m + 1, dtype=np.int64)
    nz_cols = []
    for t in range(m):
        logh += float(families.log_h(A[t], fam, layer=t).sum())
        cols = np.flatnonzero(A[t])
        nz_cols.append(cols)
        nz_ptr[t + 1] = nz_ptr[t] + cols.size
    nz_idx = np.concatenate(nz_cols) if nz_cols else np.zeros(0, dtype=np.int64)
    flags: list[str] = []
    x0, sat_x = transforms.membership_to_free(est.Z[i])
    if sat_x:
        flags.append("init_membership_saturated")
    nu0, sat_nu = transforms.interval_to_real(est.Theta[i], interval)
    if sat_nu:
        flags.append("init_degree_saturated")
    return VertexProblem(
        i=i, A=A, Yt=Yt, family=fam, interval=interval, rho=rho,
        logh_const=logh, nz_ptr=nz_ptr, nz_idx=nz_idx.astype(np.int64),
        x0=np.atleast_1d(x0), nu0=np.atleast_1d(nu0), L0=L_init,
        prior_x=prior_x, prior_nu=prior_nu, flags=flags,
    )


def spectral_loglik(problem: VertexProblem, z_star: np.ndarray, theta: np.ndarray) -> float:
    """Assisted log-likelihood at a membership/degree point (z-space)."""
    z = transforms.kappa(np.asarray(z_star, dtype=np.float64))
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    lo, hi = problem.clip_bounds
    total = 0.0
    for t in range(problem.m):
        w = z @ problem.Yt[t]
        mu = np.clip(theta[t] * w, lo, hi)
        total += float(families.log_density(problem.A[t], mu, problem.family, layer=t).sum())
    return total


def transformed_loglik_and_grad(
    problem: VertexProblem, x: np.ndarray, nu: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Assisted log-likelihood and gradient in free coordinates (x, nu)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nu = np.atleast_2d(np.asarray(nu, dtype=np.float64))
    lo, hi = problem.interval
    clo, chi = problem.clip_bounds
    V, GX, GNU, _ = loglik_batch(
        x, nu, problem.A, problem.Yt, problem.nz_ptr, problem.nz_idx,
        problem.family.code, problem.rho, lo, hi, clo, chi, problem.logh_const,
    )
    return float(V[0]), GX[0], GNU[0]


# ---------------------------------------------------------------------------
# Empirical Fisher blocks
# ---------------------------------------------------------------------------

@dataclass
class FisherBlocks:
    """Per-vertex curvature blocks of the assisted likelihood."""

    G: np.ndarray        # (m, d, d) per-layer weighted second moments
    Delta: np.ndarray    # (m, d, d) G minus its rank-one z-projection
    Gamma: np.ndarray    # (d-1+m, d-1+m) arrow-structured information matrix
    L: np.ndarray        # (d-1, d-1) Cholesky factor of the inverse Schur block
    flags: list[str] = field(default_factory=list)


def _fisher_G_all(est: SpectralEstimate, interval: tuple[float, float]) -> np.ndarray:
    """G[i, t] = (1/n) sum_j eta'(clip(theta_it z_i.y_tj)) y_tj y_tj^T for all i."""
    Y = assist_vectors(est)  # (m, n, d)
    n = est.n
    lo, hi = interval[0] + CLIP_MARGIN, interval[1] - CLIP_MARGIN
    W = np.einsum("id,tjd->tij", est.Z, Y)
    mu = est.Theta.T[:, :, None] * W  # (m, i, j)
    mu = np.clip(mu, lo, hi)
    fam = est.family
    if fam.kind == families.BERNOULLI:
        wgt = 1.0 / (mu * (1.0 - mu))
    elif fam.kind == families.POISSON:
        wgt = 1.0 / mu
    else:
        rho = fam.rho_vector(est.m)[:, None, None]
        wgt = rho / (mu * (mu + rho))
    return np.einsum("tij,tja,tjb->itab", wgt, Y, Y) / n


def _delta_stack(G: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-layer Delta = G - G z z^T G / (z^T G z), assembled in Gram form.

    With G = R R^T and q = R^T z / ||R^T z||, Delta equals A A^T for
    A = R (I - q q^T); building it that way keeps Delta positive
    semidefinite even when G is huge and nearly rank-one, where the naive
    subtraction cancels catastrophically.
    """
    m, d, _ = G.shape
    Delta = np.empty_like(G)
    eye = np.eye(d)
    for t in range(m):
        Gt = G[t]
        R = None
        for jitter in (0.0, 1e-12, 1e-9):
            try:
                R = np.linalg.cholesky(Gt + jitter * np.trace(Gt) / d * eye)
                break
            except np.linalg.LinAlgError:
                continue
        if R is not None:
            q = R.T @ z
            nrm = float(np.linalg.norm(q))
            if nrm > 0 and np.isfinite(nrm):
                q = q / nrm
                A = R - np.outer(R @ q, q)
                Delta[t] = A @ A.T
                continue
        Gz = Gt @ z
        Delta[t] = Gt - np.outer(Gz, Gz) / (z @ Gz)
    return Delta


def _fisher_blocks_from_G(
    G: np.ndarray, z: np.ndarray, theta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(Delta, Gamma) for one vertex from its (m, d, d) G stack."""
    m, d, _ = G.shape
    Gz = np.einsum("tab,b->ta", G, z)
    zGz = Gz @ z
    Delta = _delta_stack(G, z)
    J = transforms.kappa_matrix(d)
    k = d - 1
    Gamma = np.zeros((k + m, k + m))
    Gbar = np.einsum("t,tab->ab", theta**2, G) / m
    Gamma[:k, :k] = J.T @ Gbar @ J
    cross = J.T @ (Gz.T * theta[None, :]) / m  # (k, m)
    Gamma[:k, k:] = cross
    Gamma[k:, :k] = cross.T
    Gamma[k:, k:] = np.diag(zGz / m)
    return Delta, Gamma


def _chol_inv_schur(S: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Cholesky factor of S^{-1}, ridging S if it is not positive definite."""
    flags: list[str] = []
    k = S.shape[0]
    ridge = max(RIDGE_SCALE * float(np.trace(S)) / k, RIDGE_SCALE)
    attempt = S
    for trial in range(6):
        try:
            np.linalg.cholesky(attempt)
            L = np.linalg.cholesky(np.linalg.inv(attempt))
            if np.all(np.isfinite(L)):
                return L, flags
        except np.linalg.LinAlgError:
            pass
        flags.append("curvature_ridge_added")
        attempt = attempt + ridge * np.eye(k)
        ridge *= 10.0
    raise np.linalg.LinAlgError("curvature block not positive definite even after ridging")


def empirical_fisher(
    est: SpectralEstimate, i: int, interval: tuple[float, float] | None = None
) -> FisherBlocks:
    """Fisher blocks of vertex i at the preliminary estimates."""
    interval = tuple(interval) if interval is not None else tuple(est.interval)
    if est.d < 2:
        raise ValueError("Fisher blocks require d >= 2")
    G_all = _fisher_G_all(est, interval)
    return _fisher_for_vertex(G_all[i], est.Z[i], est.Theta[i])


def _fisher_for_vertex(G: np.ndarray, z: np.ndarray, theta: np.ndarray) -> FisherBlocks:
    m, d, _ = G.shape
    Delta, Gamma = _fisher_blocks_from_G(G, z, theta)
    J = transforms.kappa_matrix(d)
    Dbar = np.einsum("t,tab->ab", theta**2, Delta) / m
    S = J.T @ Dbar @ J
    S = 0.5 * (S + S.T)
    L, flags = _chol_inv_schur(S)
    return FisherBlocks(G=G, Delta=Delta, Gamma=Gamma, L=L, flags=flags)


def fisher_init_all(
    est: SpectralEstimate, interval: tuple[float, float] | None = None
) -> tuple[np.ndarray, list[list[str]]]:
    """Triangular initializers L_i for every vertex in one vectorized pass."""
    interval = tuple(interval) if interval is not None else tuple(est.interval)
    G_all = _fisher_G_all(est, interval)
    n, d = est.n, est.d
    J = transforms.kappa_matrix(d)
    Ls = np.empty((n, d - 1, d - 1))
    flags: list[list[str]] = []
    for i in range(n):
        G = G_all[i]
        z, theta = est.Z[i], est.Theta[i]
        try:
            Delta = _delta_stack(G, z)
            Dbar = np.einsum("t,tab->ab", theta**2, Delta) / est.m
            S = J.T @ Dbar @ J
            S = 0.5 * (S + S.T)
            L, fl = _chol_inv_schur(S)
        except np.linalg.LinAlgError:
            # degenerate curvature (e.g. wildly scaled preliminary block
            # means): fall back to an identity scale so the fit still runs
            L, fl = np.eye(d - 1), ["fisher_init_failed"]
        Ls[i] = L
        flags.append(fl)
    return Ls, flags


def structured_factor(Gamma: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recover (L, M, D) with Gamma^{-1} = F F^T, F = [[L, 0], [-M L, D]].

    L is the Cholesky factor of the inverse Schur complement of the degree
    block, M = Gamma_22^{-1} Gamma_21, and D = Gamma_22^{-1/2} (the degree
    block is diagonal for the arrow-structured matrices built here).
    """
    k = d - 1
    G11 = Gamma[:k, :k]
    G12 = Gamma[:k, k:]
    G22 = Gamma[k:, k:]
    G22_inv = np.linalg.inv(G22)
    S = G11 - G12 @ G22_inv @ G12.T
    S = 0.5 * (S + S.T)
    L = np.linalg.cholesky(np.linalg.inv(S))
    M = G22_inv @ G12.T
    diag = np.diag(G22)
    D = np.diag(1.0 / np.sqrt(diag))
    return L, M, D


# ---------------------------------------------------------------------------
# Negative-binomial profile dispersion
# ---------------------------------------------------------------------------

def nb_profile_dispersion(
    layers: np.ndarray,
    means: np.ndarray,
    bounds: tuple[float, float] = (1e-3, 1e4),
    rel_tol: float = 1e-6,
) -> tuple[np.ndarray, list[str]]:
    """Per-layer dispersion maximizing the profile likelihood at frozen means.

    The search runs over log-dispersion with a bounded scalar minimizer to
    relative tolerance ``rel_tol``; estimates that land at a bracket end are
    flagged.  Only the upper triangle (including the diagonal) of each layer
    enters the likelihood.
    """
    layers = np.asarray(layers, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    if layers.ndim == 2:
        layers, means = layers[None], means[None]
    m, n = layers.shape[0], layers.shape[1]
    iu = np.triu_indices(n)
    lo, hi = bounds
    flags: list[str] = []
    rhos = np.empty(m)
    for t in range(m):
        a = layers[t][iu]
        mu = means[t][iu]
        if np.any(mu <= 0):
            raise families.DomainError("frozen means must be positive")
        const = float((a * np.log(mu) - gammaln(a + 1.0)).sum())

        def neg_profile(log_rho: float) -> float:
            rho = math.exp(log_rho)
            ll = (
                gammaln(a + rho).sum()
                - a.size * gammaln(rho)
                - ((a + rho) * np.log(mu + rho)).sum()
                + a.size * rho * log_rho
            )
            return -(ll + const)

        res = minimize_scalar(
            neg_profile, bounds=(math.log(lo), math.log(hi)),
            method="bounded", options={"xatol": rel_tol},
        )
        rhos[t] = math.exp(float(res.x))
        if res.x < math.log(lo) + 10 * rel_tol or res.x > math.log(hi) - 10 * rel_tol:
            flags.append(f"dispersion_at_boundary:layer{t}")
    return rhos, flags
