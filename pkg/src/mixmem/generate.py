"""Multilayer network model: parameters, mean matrices, and samplers.

A model over m symmetric n x n layers is specified by a shared row-stochastic
membership matrix Z (n x d), per-layer degree corrections Theta (n x m), and
per-layer symmetric block-mean matrices B (m x d x d) with unit diagonal.
Layer t has mean matrix

    P^(t) = diag(Theta[:, t]) Z B^(t) Z^T diag(Theta[:, t]),

and edge weights are drawn independently (upper triangle including the
diagonal, mirrored) from the configured exponential family at those means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import families
from ._util import NS_LAYER, NS_PARAMS, derive_rng

#: Mixed-membership profiles used by the benchmark experiment geometries.
MIXED_PROFILES = np.array(
    [
        [0.4, 0.4, 0.2],
        [0.4, 0.2, 0.4],
        [0.2, 0.4, 0.4],
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ]
)

#: Fraction of vertices that are pure per community, by experiment id.
PURE_FRACTION = {1: 80.0 / 500.0, 2: 40.0 / 500.0, 3: 80.0 / 500.0}


class GenerationError(ValueError):
    """Raised when a requested mean falls outside the family's interval."""


@dataclass
class ModelParams:
    """Ground-truth parameters of a multilayer mixed-membership model."""

    Z: np.ndarray        # (n, d) row-stochastic memberships
    Theta: np.ndarray    # (n, m) positive degree corrections
    B: np.ndarray        # (m, d, d) symmetric, unit diagonal
    family: families.EdgeFamily

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.Theta = np.asarray(self.Theta, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim == 2:
            self.B = self.B[None, :, :]
        if self.Theta.ndim == 1:
            self.Theta = self.Theta[:, None]

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    def validate(self, *, theta_bounds: tuple[float, float] | None = None, atol: float = 1e-10) -> None:
        n, d, m = self.n, self.d, self.m
        if self.Theta.shape != (n, m):
            raise ValueError(f"Theta shape {self.Theta.shape} != {(n, m)}")
        if self.B.shape != (m, d, d):
            raise ValueError(f"B shape {self.B.shape} != {(m, d, d)}")
        if np.any(self.Z < -atol) or np.any(np.abs(self.Z.sum(axis=1) - 1.0) > atol):
            raise ValueError("Z rows must be nonnegative and sum to one")
        if np.any(self.Theta <= 0):
            raise ValueError("degree corrections must be positive")
        if theta_bounds is not None:
            lo, hi = theta_bounds
            if np.any(self.Theta < lo - atol) or np.any(self.Theta > hi + atol):
                raise ValueError(f"degree corrections outside [{lo}, {hi}]")
        for t in range(m):
            Bt = self.B[t]
            if np.max(np.abs(Bt - Bt.T)) > atol:
                raise ValueError(f"B[{t}] is not symmetric")
            if np.max(np.abs(np.diag(Bt) - 1.0)) > atol:
                raise ValueError(f"B[{t}] diagonal must be one")
        # every community needs at least one pure vertex for identifiability
        for k in range(d):
            if not np.any(self.Z[:, k] >= 1.0 - atol):
                raise ValueError(f"community {k} has no pure vertex")


@dataclass
class MultilayerNetwork:
    """Observed symmetric adjacency layers stacked as an (m, n, n) array."""

    layers: np.ndarray
    family: families.EdgeFamily
    clipped_means: int = 0

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        if self.layers.ndim == 2:
            self.layers = self.layers[None, :, :]

    @property
    def m(self) -> int:
        return self.layers.shape[0]

    @property
    def n(self) -> int:
        return self.layers.shape[1]


def mean_matrix(params: ModelParams, t: int) -> np.ndarray:
    """Exactly symmetric mean matrix P^(t)."""
    th = params.Theta[:, t]
    M = th[:, None] * params.Z
    P = M @ params.B[t] @ M.T
    return 0.5 * (P + P.T)


def sample_network(
    params: ModelParams,
    seed: int,
    *,
    clip_means: bool = False,
) -> MultilayerNetwork:
    """Draw a network; layer t uses the independent stream (seed, layer, t).

    Means outside the family interval raise ``GenerationError`` unless
    ``clip_means`` is set, in which case they are clipped into the interval
    and counted (a warning is emitted once per call).
    """
    fam = params.family
    lo, hi = fam.interval
    n, m = params.n, params.m
    layers = np.empty((m, n, n))
    iu = np.triu_indices(n)
    clipped = 0
    for t in range(m):
        P = mean_matrix(params, t)
        mu = P[iu]
        bad = (mu < lo) | (mu > hi)
        if np.any(bad):
            if not clip_means:
                i, j = iu[0][np.argmax(bad)], iu[1][np.argmax(bad)]
                raise GenerationError(
                    f"mean {mu[np.argmax(bad)]:.6g} at (layer={t}, i={i}, j={j}) "
                    f"outside interval [{lo:.6g}, {hi:.6g}]"
                )
            clipped += int(bad.sum())
            mu = np.clip(mu, lo, hi)
        rng = derive_rng(seed, NS_LAYER, t)
        vals = families.sample(mu, fam, rng, layer=t)
        A = np.zeros((n, n))
        A[iu] = vals
        A.T[iu] = vals
        layers[t] = A
    if clipped:
        warnings.warn(f"clipped {clipped} means into the family interval during generation")
    return MultilayerNetwork(layers=layers, family=fam, clipped_means=clipped)


def _experiment_memberships(which: int, n: int, d: int) -> tuple[np.ndarray, int]:
    if d != 3:
        raise ValueError("benchmark experiment geometries are defined for d = 3")
    n0 = int(np.floor(PURE_FRACTION[which] * n))
    if n0 < 1 or 3 * n0 >= n:
        raise ValueError(f"n = {n} too small for experiment {which}")
    Z = np.zeros((n, 3))
    for k in range(3):
        Z[k * n0 : (k + 1) * n0, k] = 1.0
    return Z, n0


def experiment_params(
    which: int,
    n: int,
    m: int,
    d: int,
    seed: int,
    *,
    family_kind: str = families.POISSON,
    dispersion: float | np.ndarray | None = None,
) -> ModelParams:
    """Parameters for the benchmark simulation geometries.

    Experiment 1 (default Poisson): per community, floor(0.16 n) pure
    vertices; the mixed remainder splits evenly across the four profiles in
    ``MIXED_PROFILES`` (leftover vertices get the uniform profile);
    theta ~ 1/Uniform(1, 5); B off-diagonals ~ max(0.01, N(0.08, 0.1^2)).

    Experiment 2: floor(0.08 n) pure vertices per community; mixed rows drawn
    as z_1, z_2 ~ Uniform(1/6, 1/2), z_3 = 1 - z_1 - z_2;
    theta ~ Uniform(1, 2); same B scheme.

    Experiment 3: the Experiment-1 geometry with Bernoulli edges (means are
    clipped into [0.01, 0.99] at sampling time by the callers that generate
    data from these parameters).

    The working interval of the returned family is computed from the true
    means so that generation never rejects (Bernoulli keeps its fixed
    interval and relies on clipping).
    """
    if which not in (1, 2, 3):
        raise ValueError(f"unknown experiment {which}; expected 1, 2, or 3")
    if which == 3 and family_kind == families.POISSON:
        family_kind = families.BERNOULLI
    rng = derive_rng(seed, NS_PARAMS)
    Z, n0 = _experiment_memberships(which, n, d)
    if which in (1, 3):
        n_mixed = n - 3 * n0
        q = n_mixed // 4
        pos = 3 * n0
        for profile in MIXED_PROFILES:
            Z[pos : pos + q] = profile
            pos += q
        Z[pos:] = MIXED_PROFILES[-1]  # leftover vertices: uniform profile
        Theta = 1.0 / rng.uniform(1.0, 5.0, size=(n, m))
    else:
        z12 = rng.uniform(1.0 / 6.0, 1.0 / 2.0, size=(n - 3 * n0, 2))
        Z[3 * n0 :, 0] = z12[:, 0]
        Z[3 * n0 :, 1] = z12[:, 1]
        Z[3 * n0 :, 2] = 1.0 - z12.sum(axis=1)
        Theta = rng.uniform(1.0, 2.0, size=(n, m))
    B = np.empty((m, d, d))
    for t in range(m):
        Bt = np.eye(d)
        iu = np.triu_indices(d, k=1)
        off = np.maximum(0.01, rng.normal(0.08, 0.1, size=len(iu[0])))
        Bt[iu] = off
        Bt.T[iu] = off
        B[t] = Bt
    if family_kind == families.BERNOULLI:
        fam = families.EdgeFamily(families.BERNOULLI, families.BERNOULLI_INTERVAL)
    else:
        fam = families.EdgeFamily(family_kind, (0.0, np.inf), dispersion)
        params = ModelParams(Z=Z, Theta=Theta, B=B, family=fam)
        pmin, pmax = _mean_range(params)
        lo = min(families.COUNT_LOWER, 0.9 * pmin, 0.9 * float(Theta.min()))
        hi = 1.1 * max(pmax, float(Theta.max()))
        fam = fam.with_interval((max(lo, 1e-12), hi))
    return ModelParams(Z=Z, Theta=Theta, B=B, family=fam)


def _mean_range(params: ModelParams) -> tuple[float, float]:
    lo, hi = np.inf, -np.inf
    for t in range(params.m):
        P = mean_matrix(params, t)
        lo = min(lo, float(P.min()))
        hi = max(hi, float(P.max()))
    return lo, hi
