"""Structured Gaussian variational inference for per-vertex parameters.

The variational family on the free coordinates (x, nu) is Gaussian with mean
(mu1, mu2) and covariance (1/mn) F F^T where

    F = [[L, 0], [-M L, diag(sigma)]],

L lower triangular.  ``structure="structured"`` learns M; ``structure="blockdiag"``
freezes M at zero.  The noisy objective is the reparameterized negative ELBO

    F_hat = -log det L - sum log sigma - loglik(x, nu) - log pi_x(x) - log pi_nu(nu)

averaged over a batch of standard-normal draws, and parameters follow Adam on
the 1/sqrt(mn)-scaled batch gradient.  Inside the optimizer the entropy
gradients replace 1/v by the smooth surrogate c_n/(c_n v + 1) (v > 0) /
c_n - c_n^2 v (v <= 0) with c_n = 10 sqrt(mn), which keeps steps finite when
a scale parameter crosses zero; the exact-gradient evaluator
``noisy_objective_and_grads`` keeps the true -1/v terms.

Convergence is declared when the exponential moving average of the objective
changes by less than ``tol_rel`` (relative) between consecutive
``window``-iteration boundaries; a jump upward by more than
``divergence_factor`` times the reference magnitude aborts the fit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import fit_chunk, loglik_batch
from ._util import NS_VERTEX, derive_seed
from .generate import MultilayerNetwork
from .likelihood import (
    VertexProblem,
    build_vertex_problem,
    fisher_init_all,
    uniform_prior_nu,
    uniform_prior_x,
)
from .spectral import SpectralEstimate, assist_vectors

_STRUCTURES = ("structured", "blockdiag")


class FitDivergenceError(RuntimeError):
    """The noisy objective jumped upward past the divergence guard."""

    def __init__(self, vertex: int, iteration: int, objective: float):
        super().__init__(
            f"variational fit diverged at vertex {vertex}, iteration {iteration} "
            f"(objective {objective:.6g})"
        )
        self.vertex = vertex
        self.iteration = iteration
        self.objective = objective


@dataclass(frozen=True)
class VIConfig:
    """Optimizer and convergence settings for the variational fit."""

    alpha0: float = 0.01          # Adam step size
    beta1: float = 0.9            # Adam first-moment decay
    beta2: float = 0.999          # Adam second-moment decay
    adam_eps: float = 1e-8        # Adam denominator offset
    batch: int = 8                # reparameterization draws per iteration
    max_iter: int = 5000
    tol_rel: float = 1e-6         # relative EMA change declaring convergence
    window: int = 200             # iterations between EMA comparisons
    ema_decay: float = 0.99
    divergence_factor: float = 10.0
    cn_factor: float = 10.0       # c_n = cn_factor * sqrt(mn)
    structure: str = "structured"  # "structured" or "blockdiag"
    chunk: int = 512              # kernel iterations per noise pre-generation
    param_floor: float = 1e-10    # post-fit floor on L diagonal and sigma

    def __post_init__(self):
        if self.structure not in _STRUCTURES:
            raise ValueError(f"structure must be one of {_STRUCTURES}")
        if self.batch < 1 or self.max_iter < 0 or self.window < 1 or self.chunk < 1:
            raise ValueError("batch, window, chunk must be >= 1 and max_iter >= 0")


@dataclass
class VariationalPosterior:
    """Fitted structured Gaussian posterior for one vertex."""

    vertex: int
    mu1: np.ndarray       # (d-1,) free membership mean
    mu2: np.ndarray       # (m,) free degree mean
    L: np.ndarray         # (d-1, d-1) lower-triangular membership scale
    M: np.ndarray         # (m, d-1) cross-coupling (zero under blockdiag)
    sigma: np.ndarray     # (m,) residual degree scales
    n_vertices: int
    structure: str = "structured"
    converged: bool = False
    n_iter: int = 0
    final_objective: float = math.nan
    ema_objective: float = math.nan
    clip_fraction: float = 0.0
    flags: list[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.mu1.size + 1

    @property
    def m(self) -> int:
        return self.mu2.size

    @property
    def scale(self) -> float:
        mn = self.m * self.n_vertices
        return 1.0 / math.sqrt(mn) if mn > 0 else 1.0

    def factor(self) -> np.ndarray:
        """Unscaled joint factor F with covariance = scale^2 * F F^T."""
        k, m = self.d - 1, self.m
        F = np.zeros((k + m, k + m))
        F[:k, :k] = self.L
        F[k:, :k] = -self.M @ self.L
        F[k:, k:] = np.diag(self.sigma)
        return F

    def covariance(self) -> np.ndarray:
        F = self.factor()
        return (F @ F.T) * self.scale**2

    def x_covariance(self) -> np.ndarray:
        """Covariance of the free membership block alone."""
        return (self.L @ self.L.T) * self.scale**2

    def draw(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Joint posterior draws of the free coordinates (X, NU)."""
        k, m = self.d - 1, self.m
        eps = rng.standard_normal((size, k + m))
        Le = eps[:, :k] @ self.L.T
        X = self.mu1 + Le * self.scale
        NU = self.mu2 - (Le @ self.M.T) * self.scale + self.sigma * eps[:, k:] * self.scale
        return X, NU


# ---------------------------------------------------------------------------
# Parameter vector packing (must match the kernel layout)
# ---------------------------------------------------------------------------

def _pack_params(mu1, mu2, L, M, sigma) -> np.ndarray:
    k, m = mu1.size, mu2.size
    tri = np.tril_indices(k)
    return np.concatenate([mu1, mu2, L[tri], M.reshape(-1), sigma])


def _unpack_params(p: np.ndarray, k: int, m: int):
    nL = k * (k + 1) // 2
    off = 0
    mu1 = p[off:off + k].copy(); off += k
    mu2 = p[off:off + m].copy(); off += m
    L = np.zeros((k, k))
    L[np.tril_indices(k)] = p[off:off + nL]; off += nL
    M = p[off:off + m * k].reshape(m, k).copy(); off += m * k
    sigma = p[off:off + m].copy()
    return mu1, mu2, L, M, sigma


def initial_posterior(problem: VertexProblem, structure: str = "structured") -> VariationalPosterior:
    """The fit's starting point: spectral means, Fisher scale, M = 0, sigma = 1."""
    k, m = problem.d - 1, problem.m
    flags = list(problem.flags)
    if problem.L0 is None:
        L = np.eye(k)
        flags.append("default_scale_init")
    else:
        L = np.array(problem.L0, dtype=np.float64)
    x0 = problem.x0 if problem.x0 is not None else np.zeros(k)
    nu0 = problem.nu0 if problem.nu0 is not None else np.zeros(m)
    return VariationalPosterior(
        vertex=problem.i, mu1=np.asarray(x0, dtype=np.float64).copy(),
        mu2=np.asarray(nu0, dtype=np.float64).copy(), L=L,
        M=np.zeros((m, k)), sigma=np.ones(m), n_vertices=problem.n,
        structure=structure, flags=flags,
    )


# ---------------------------------------------------------------------------
# Exact noisy objective (reference implementation, used by gradient tests)
# ---------------------------------------------------------------------------

def noisy_objective_and_grads(
    problem: VertexProblem, post: VariationalPosterior, eps: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean reparameterized objective and its exact parameter gradients.

    ``eps`` has shape (batch, d-1+m); the first d-1 columns drive the
    membership block.  Entropy gradients here are the exact -1/L_aa and
    -1/sigma_t (no smooth surrogate), so finite differences of the returned
    value match the returned gradients.
    """
    k, m = problem.d - 1, problem.m
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if eps.shape[1] != k + m:
        raise ValueError(f"eps must have {k + m} columns")
    s = eps.shape[0]
    scale = problem.scale
    e1, e2 = eps[:, :k], eps[:, k:]
    Le = e1 @ post.L.T                                    # (s, k)
    X = post.mu1 + Le * scale
    NU = post.mu2 - (Le @ post.M.T) * scale + post.sigma * e2 * scale
    lo, hi = problem.interval
    clo, chi = problem.clip_bounds
    V, GX, GNU, _ = loglik_batch(
        np.ascontiguousarray(X), np.ascontiguousarray(NU),
        problem.A, problem.Yt, problem.nz_ptr, problem.nz_idx,
        problem.family.code, problem.rho, lo, hi, clo, chi, problem.logh_const,
    )
    px_logpdf, px_grad = problem.prior_x or uniform_prior_x(problem.d)
    pn_logpdf, pn_grad = problem.prior_nu or uniform_prior_nu(m)
    for r in range(s):
        V[r] += px_logpdf(X[r]) + pn_logpdf(NU[r])
        GX[r] += px_grad(X[r])
        GNU[r] += pn_grad(NU[r])
    diagL = np.diag(post.L)
    entropy = -np.log(np.abs(diagL)).sum() - np.log(np.abs(post.sigma)).sum()
    value = entropy - float(V.mean())
    Gx_eff = GX - GNU @ post.M                            # (s, k)
    gL = -(Gx_eff.T @ e1) * (scale / s)
    gL[np.triu_indices(k, 1)] = 0.0
    gL[np.diag_indices(k)] -= 1.0 / diagL
    grads = {
        "mu1": -GX.mean(axis=0),
        "mu2": -GNU.mean(axis=0),
        "L": gL,
        "M": (GNU.T @ Le) * (scale / s),
        "sigma": -1.0 / post.sigma - (GNU * e2).mean(axis=0) * scale,
    }
    return value, grads


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _scaled_inverse_np(v: np.ndarray, cn: float) -> np.ndarray:
    return np.where(v > 0.0, cn / (cn * v + 1.0), cn - cn * cn * v)


def _fit_python(problem: VertexProblem, cfg: VIConfig, rng: np.random.Generator,
                p: np.ndarray, state: np.ndarray, ring: np.ndarray) -> None:
    """Reference optimizer loop; also the path for user-supplied priors.

    Mirrors the compiled ``fit_chunk`` step for step, including the noise
    consumption pattern, the entropy surrogate, and the convergence monitor.
    """
    k, m = problem.d - 1, problem.m
    px_logpdf, px_grad = problem.prior_x or uniform_prior_x(problem.d)
    pn_logpdf, pn_grad = problem.prior_nu or uniform_prior_nu(m)
    scale = problem.scale
    cn = cfg.cn_factor * math.sqrt(max(problem.m * problem.n, 1))
    lo, hi = problem.interval
    clo, chi = problem.clip_bounds
    tri = np.tril_indices(k)
    nL = tri[0].size
    off_L, off_M, off_s = k + m, k + m + nL, k + m + nL + m * k
    diag_idx = off_L + np.arange(k) * (np.arange(k) + 1) // 2 + np.arange(k)
    m1 = np.zeros_like(p)
    m2 = np.zeros_like(p)
    blockdiag = cfg.structure == "blockdiag"
    ema = state[0]
    have = state[1] > 0.5
    status = 0.0
    git = int(state[3])
    denom_terms = float(max(1, cfg.batch * problem.m * problem.n))
    while git < cfg.max_iter:
        nchunk = min(cfg.chunk, cfg.max_iter - git)
        EPS = rng.standard_normal((nchunk, cfg.batch, k + m))
        for local in range(nchunk):
            git += 1
            eps = EPS[local]
            mu1, mu2, L, M, sigma = _unpack_params(p, k, m)
            e1, e2 = eps[:, :k], eps[:, k:]
            Le = e1 @ L.T
            X = mu1 + Le * scale
            NU = mu2 - (Le @ M.T) * scale + sigma * e2 * scale
            V, GX, GNU, nclip = loglik_batch(
                np.ascontiguousarray(X), np.ascontiguousarray(NU),
                problem.A, problem.Yt, problem.nz_ptr, problem.nz_idx,
                problem.family.code, problem.rho, lo, hi, clo, chi,
                problem.logh_const,
            )
            for r in range(cfg.batch):
                V[r] += px_logpdf(X[r]) + pn_logpdf(NU[r])
                GX[r] += px_grad(X[r])
                GNU[r] += pn_grad(NU[r])
            gacc = np.zeros_like(p)
            gacc[:k] = -GX.mean(axis=0)
            gacc[k:k + m] = -GNU.mean(axis=0)
            Gx_eff = GX - GNU @ M
            gL = -(Gx_eff.T @ e1) * (scale / cfg.batch)
            gacc[off_L:off_M] = gL[tri]
            gacc[off_M:off_s] = ((GNU.T @ Le) * (scale / cfg.batch)).reshape(-1)
            gacc[off_s:] = -(GNU * e2).mean(axis=0) * scale
            gacc[diag_idx] -= _scaled_inverse_np(p[diag_idx], cn)
            gacc[off_s:] -= _scaled_inverse_np(p[off_s:], cn)
            F = -float(V.mean())
            F -= np.log(np.maximum(np.abs(p[diag_idx]), 1e-300)).sum()
            F -= np.log(np.maximum(np.abs(p[off_s:]), 1e-300)).sum()
            state[4] = F
            state[5] = nclip / denom_terms
            if not math.isfinite(F):
                status = 2.0
                break
            if blockdiag:
                gacc[off_M:off_s] = 0.0
            g = gacc * scale
            m1[:] = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g
            m2[:] = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g * g
            bc1 = 1.0 - cfg.beta1**git
            bc2 = 1.0 - cfg.beta2**git
            p -= cfg.alpha0 * (m1 / bc1) / (np.sqrt(m2 / bc2) + cfg.adam_eps)
            if have:
                ema = cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * F
            else:
                ema = F
                have = True
            if git % cfg.window == 0:
                if git > cfg.window:
                    prev = ring[0]
                    ref = max(1.0, abs(prev))
                    if abs(ema - prev) < cfg.tol_rel * ref:
                        status = 1.0
                        ring[0] = ema
                        break
                    if ema - prev > cfg.divergence_factor * ref:
                        status = 2.0
                        ring[0] = ema
                        break
                ring[0] = ema
        if status != 0.0:
            break
    state[0] = ema
    state[1] = 1.0 if have else 0.0
    state[2] = status
    state[3] = git


def fit_vertex(problem: VertexProblem, cfg: VIConfig | None = None,
               seed: int = 0) -> VariationalPosterior:
    """Fit the structured Gaussian posterior for one vertex.

    Raises :class:`FitDivergenceError` if the objective blows up; reaching
    ``max_iter`` without triggering the EMA test returns a posterior with
    ``converged=False``.
    """
    cfg = cfg if cfg is not None else VIConfig()
    if problem.d < 2:
        raise ValueError("the fit requires at least two communities")
    init = initial_posterior(problem, cfg.structure)
    if cfg.max_iter == 0:
        return init
    k, m = problem.d - 1, problem.m
    p = _pack_params(init.mu1, init.mu2, init.L, init.M, init.sigma)
    state = np.zeros(6)
    ring = np.zeros(cfg.window)
    rng = np.random.default_rng(seed)
    custom = problem.prior_x is not None or problem.prior_nu is not None
    if custom:
        _fit_python(problem, cfg, rng, p, state, ring)
    else:
        m1 = np.zeros_like(p)
        m2 = np.zeros_like(p)
        lo, hi = problem.interval
        clo, chi = problem.clip_bounds
        scale = problem.scale
        cn = cfg.cn_factor * math.sqrt(max(problem.m * problem.n, 1))
        blockdiag = 1 if cfg.structure == "blockdiag" else 0
        it = 0
        while it < cfg.max_iter:
            nchunk = min(cfg.chunk, cfg.max_iter - it)
            EPS = rng.standard_normal((nchunk, cfg.batch, k + m))
            fit_chunk(
                p, m1, m2, ring, state, it, EPS,
                problem.A, problem.Yt, problem.nz_ptr, problem.nz_idx,
                problem.family.code, problem.rho, lo, hi, clo, chi,
                problem.logh_const, scale, cn, cfg.alpha0, cfg.beta1,
                cfg.beta2, cfg.adam_eps, cfg.ema_decay, cfg.tol_rel,
                cfg.divergence_factor, cfg.window, cfg.max_iter, blockdiag,
            )
            it = int(state[3])
            if state[2] != 0.0:
                break
    if state[2] == 2.0:
        raise FitDivergenceError(problem.i, int(state[3]), float(state[4]))
    mu1, mu2, L, M, sigma = _unpack_params(p, k, m)
    flags = list(init.flags)
    diag = np.diag(L).copy()
    if np.any(diag < cfg.param_floor) or np.any(sigma < cfg.param_floor):
        flags.append("scale_floored")
    L[np.diag_indices(k)] = np.maximum(diag, cfg.param_floor)
    sigma = np.maximum(sigma, cfg.param_floor)
    if cfg.structure == "blockdiag":
        M = np.zeros((m, k))
    return VariationalPosterior(
        vertex=problem.i, mu1=mu1, mu2=mu2, L=L, M=M, sigma=sigma,
        n_vertices=problem.n, structure=cfg.structure,
        converged=state[2] == 1.0, n_iter=int(state[3]),
        final_objective=float(state[4]), ema_objective=float(state[0]),
        clip_fraction=float(state[5]), flags=flags,
    )


@dataclass
class FitResults:
    """Per-vertex posteriors (None where the fit failed) plus diagnostics."""

    posteriors: list[VariationalPosterior | None]
    errors: dict[int, str]
    structure: str
    interval: tuple[float, float]
    seed: int

    @property
    def n(self) -> int:
        return len(self.posteriors)

    @property
    def n_failed(self) -> int:
        return len(self.errors)

    def require_complete(self) -> None:
        if self.errors:
            idx = sorted(self.errors)
            raise RuntimeError(f"variational fit failed for vertices {idx}")


def fit_all(
    network: MultilayerNetwork,
    est: SpectralEstimate,
    cfg: VIConfig | None = None,
    seed: int = 0,
    threads: int = 1,
    interval: tuple[float, float] | None = None,
    prior_x=None,
    prior_nu=None,
) -> FitResults:
    """Fit every vertex; per-vertex seeds derive from ``seed`` and the index.

    Failures (divergence, numerical errors) are recorded per vertex and the
    remaining posteriors are kept.  Results are independent of ``threads``.
    """
    cfg = cfg if cfg is not None else VIConfig()
    interval = tuple(interval) if interval is not None else tuple(est.interval)
    n = est.n
    Y = assist_vectors(est)
    Ls, fisher_flags = fisher_init_all(est, interval)
    problems = []
    for i in range(n):
        pb = build_vertex_problem(
            network, est, i, interval=interval, L_init=Ls[i],
            prior_x=prior_x, prior_nu=prior_nu, _Y=Y,
        )
        pb.flags.extend(fisher_flags[i])
        problems.append(pb)
    posteriors: list[VariationalPosterior | None] = [None] * n
    errors: dict[int, str] = {}

    def run(i: int) -> None:
        try:
            posteriors[i] = fit_vertex(problems[i], cfg, derive_seed(seed, NS_VERTEX, i))
        except Exception as exc:  # noqa: BLE001 - partial results by contract
            errors[i] = f"{type(exc).__name__}: {exc}"

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run, range(n)))
    else:
        for i in range(n):
            run(i)
    return FitResults(
        posteriors=posteriors, errors=errors, structure=cfg.structure,
        interval=interval, seed=seed,
    )
