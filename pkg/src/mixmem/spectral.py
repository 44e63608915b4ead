"""Spectral preliminary estimation for multilayer mixed-membership models.

Per layer, memberships are recovered by an eigenvector-ratio method: the
entrywise ratios of the trailing eigenvectors to the leading one land (up to
noise) in a simplex whose vertices correspond to pure vertices; a vertex hunt
(k-means compression followed by successive projection) finds those corners,
and barycentric coordinates give the membership estimate.  Layer estimates
share columns only up to a permutation, so they are aligned to the first
layer and averaged.  Degree corrections and block-mean matrices then follow
in closed form from the leading eigenvector and the hunted corners.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from . import families
from .generate import MultilayerNetwork

MAX_ALIGN_DIM = 8  # exhaustive d! alignment guard


class SpectralError(ValueError):
    pass


class DegenerateHullError(SpectralError):
    """Vertex hunting could not produce a usable simplex."""


class AlignmentError(SpectralError):
    pass


@dataclass
class SpectralConfig:
    kmeans_restarts: int = 20
    kmeans_seed: int = 0
    cluster_factor: int = 10        # k-means uses min(cluster_factor*d, n//2) clusters
    cond_max: float = 1e8           # corner-matrix condition limit before retrying
    max_hunt_retries: int = 50
    b_radicand_floor: float = 1e-12
    reselect_positive: bool = True  # retry a layer on positive eigenvalues when the scale radicand fails
    tau: float | None = None        # pure-vertex threshold; default n^(-1/3)
    label_align: bool = True
    theta_floor: float | None = None  # default: family lower interval bound


@dataclass
class LayerSpectral:
    """Spectral quantities of one layer, in that layer's own label order."""

    eigvals: np.ndarray      # (d,) reordered: positives desc, then negatives desc
    u1: np.ndarray           # (n,) sign-fixed leading eigenvector
    ratios: np.ndarray       # (n, d-1) truncated eigenvector ratios
    corner_rows: np.ndarray  # (d,) indices of hunted pure-vertex rows
    V: np.ndarray            # (d-1, d) hunted corners as columns
    b1: np.ndarray           # (d,) leading-eigenvector scale per community
    Z: np.ndarray            # (n, d) membership estimate
    Bbar: np.ndarray         # (d, d) block-mean estimate
    flags: list[str] = field(default_factory=list)


@dataclass
class SpectralEstimate:
    """Aggregated preliminary estimates across layers (aligned labels)."""

    Z: np.ndarray            # (n, d)
    Theta: np.ndarray        # (n, m)
    B: np.ndarray            # (m, d, d)
    family: families.EdgeFamily
    interval: tuple[float, float]
    perms: list[tuple[int, ...]]           # per-layer column alignment to layer 0
    label_perm: tuple[int, ...]            # final relabeling by first pure vertex
    flags: list[str] = field(default_factory=list)
    layers: list[LayerSpectral] | None = None

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def m(self) -> int:
        return self.Theta.shape[1]


# ---------------------------------------------------------------------------
# per-layer pieces
# ---------------------------------------------------------------------------

def top_eigen(
    A: np.ndarray, d: int, *, positive_only: bool = False
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Top-d eigenpairs by |lambda|, positives (desc) before negatives (desc).

    With ``positive_only`` the d largest strictly-positive eigenvalues are
    selected instead (raising if fewer than d exist); this serves as a
    fallback when the magnitude rule demonstrably picked up noise.

    The leading eigenvector's sign is fixed so that at least 2n/3 of its
    entries are positive; if neither sign achieves that, the majority sign is
    used and a flag records the ambiguity.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if not 1 <= d <= n:
        raise SpectralError(f"need 1 <= d <= n, got d={d}, n={n}")
    vals, vecs = np.linalg.eigh(A)
    if positive_only:
        # meaningfully positive relative to the spectrum scale, so that
        # numerically-zero eigenvalues cannot masquerade as signal
        tol = float(np.abs(vals).max()) * 1e-10
        pos_all = [i for i in range(n) if vals[i] > tol]
        if len(pos_all) < d:
            raise SpectralError(
                f"positive-only selection needs {d} positive eigenvalues, found {len(pos_all)}"
            )
        keep = sorted(pos_all, key=lambda i: -vals[i])[:d]
    else:
        # order by magnitude, breaking |.| ties in favor of the positive eigenvalue
        order = sorted(range(n), key=lambda i: (-abs(vals[i]), -np.sign(vals[i])))
        keep = order[:d]
    pos = sorted([i for i in keep if vals[i] >= 0], key=lambda i: -vals[i])
    neg = sorted([i for i in keep if vals[i] < 0], key=lambda i: -vals[i])
    keep = pos + neg
    lam = vals[keep].copy()
    U = vecs[:, keep].copy()
    flags: list[str] = []
    u1 = U[:, 0]
    n_pos = int(np.sum(u1 > 0))
    n_neg = int(np.sum(u1 < 0))
    threshold = 2.0 * n / 3.0
    if n_pos >= threshold:
        pass
    elif n_neg >= threshold:
        U[:, 0] = -u1
    else:
        flags.append("leading_vector_sign_ambiguous")
        if n_neg > n_pos:
            U[:, 0] = -u1
    return lam, U, flags


def score_ratios(U: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Entrywise ratios U[:, k+1]/U[:, 0], truncated at +/- log(n)."""
    n, d = U.shape
    cap = np.log(n)
    flags: list[str] = []
    if d == 1:
        return np.zeros((n, 0)), flags
    u1 = U[:, 0]
    zero = u1 == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        R = U[:, 1:] / u1[:, None]
    if np.any(zero):
        flags.append(f"zero_leading_entries:{int(zero.sum())}")
        R[zero] = np.sign(U[zero, 1:]) * cap
    R = np.clip(R, -cap, cap)
    return R, flags


def _spa_select(X: np.ndarray, d: int) -> list[int]:
    """Successive projection on rows of X: greedily pick d maximal-residual
    rows, projecting out each chosen direction."""
    resid = X.astype(np.float64).copy()
    chosen: list[int] = []
    for _ in range(d):
        norms = np.einsum("ij,ij->i", resid, resid)
        j = int(np.argmax(norms))
        if norms[j] <= 0:
            break
        chosen.append(j)
        v = resid[j] / np.sqrt(norms[j])
        resid -= np.outer(resid @ v, v)
    return chosen


def vertex_hunt(R: np.ndarray, d: int, cfg: SpectralConfig | None = None) -> tuple[np.ndarray, list[str]]:
    """Indices of d rows of R forming the membership simplex corners.

    The rows are first compressed with k-means (restarted, deterministic
    seed), then successive projection on the affinely-augmented centers picks
    d extreme centers, each mapped to its nearest data row.  Candidate sets
    whose corner matrix is numerically singular are discarded and the hunt
    retried on the remaining centers.
    """
    cfg = cfg or SpectralConfig()
    R = np.asarray(R, dtype=np.float64)
    n = R.shape[0]
    flags: list[str] = []
    if d == 1:
        return np.array([int(np.argmax(np.zeros(n)))]), flags
    if R.shape[1] != d - 1:
        raise SpectralError(f"ratio matrix has {R.shape[1]} columns, expected {d - 1}")
    K = max(d, min(cfg.cluster_factor * d, n // 2))
    with warnings.catch_warnings():
        # duplicate ratio rows (exact in noiseless data) make k-means find
        # fewer distinct clusters than requested; that is expected here
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(
            n_clusters=K,
            init="k-means++",
            n_init=cfg.kmeans_restarts,
            random_state=cfg.kmeans_seed,
        ).fit(R)
    centers = km.cluster_centers_
    pool = np.ones(len(centers), dtype=bool)
    for _ in range(cfg.max_hunt_retries + 1):
        if pool.sum() < d:
            raise DegenerateHullError("vertex hunting exhausted candidate centers")
        idx_pool = np.flatnonzero(pool)
        aug = np.column_stack([np.ones(len(idx_pool)), centers[idx_pool]])
        picked = _spa_select(aug, d)
        if len(picked) < d:
            raise DegenerateHullError("successive projection collapsed early")
        picked_centers = centers[idx_pool[picked]]
        rows = np.empty(d, dtype=np.int64)
        for a in range(d):
            rows[a] = int(np.argmin(((R - picked_centers[a]) ** 2).sum(axis=1)))
        T = np.vstack([np.ones(d), R[rows].T])
        if np.linalg.cond(T) <= cfg.cond_max:
            return rows, flags
        flags.append("degenerate_corner_set_retry")
        pool[idx_pool[picked[-1]]] = False
    raise DegenerateHullError("vertex hunting failed to find a well-conditioned simplex")


def _layer_attempt(
    A: np.ndarray, d: int, cfg: SpectralConfig, *, positive_only: bool = False
) -> tuple[np.ndarray, np.ndarray, list[str], np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One eigen-selection attempt: eigenpairs, ratios, hunted corners, and
    the per-community scale radicands (pre-clamp)."""
    lam, U, flags = top_eigen(A, d, positive_only=positive_only)
    R, rflags = score_ratios(U)
    flags += rflags
    corner_rows, hflags = vertex_hunt(R, d, cfg)
    flags += hflags
    V = R[corner_rows].T.copy()  # (d-1, d): corner k in column k
    radicand = lam[0] + np.einsum("ak,a,ak->k", V, lam[1:], V) if d > 1 else np.array([lam[0]])
    return lam, U, flags, R, corner_rows, V, radicand


def layer_mixed_score(A: np.ndarray, d: int, cfg: SpectralConfig | None = None) -> LayerSpectral:
    """Membership and block estimates for one layer (own label order)."""
    cfg = cfg or SpectralConfig()
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    lam, U, flags, R, corner_rows, V, radicand = _layer_attempt(A, d, cfg)
    # A non-positive scale radicand cannot occur at the population matrix of
    # any valid model, so it certifies that the magnitude-based selection
    # picked up a noise eigenvalue (possible when a weak signal eigenvalue
    # sits near the noise edge).  Retry the layer on the positive part of the
    # spectrum before falling back to the clamp.
    if (
        cfg.reselect_positive
        and d > 1
        and np.any(radicand <= cfg.b_radicand_floor)
        and np.any(lam < 0.0)
    ):
        try:
            retry = _layer_attempt(A, d, cfg, positive_only=True)
        except SpectralError:
            pass
        else:
            if np.all(retry[6] > cfg.b_radicand_floor):
                lam, U, _rflags, R, corner_rows, V, radicand = retry
                flags = _rflags + ["eigenvalues_reselected_positive"]
    clamped = radicand <= cfg.b_radicand_floor
    if np.any(clamped):
        flags.append(f"b_scale_radicand_clamped:{int(clamped.sum())}")
        radicand = np.maximum(radicand, cfg.b_radicand_floor)
    b1 = radicand ** -0.5
    T = np.vstack([np.ones(d), V]) if d > 1 else np.ones((1, 1))
    W = np.linalg.solve(T, np.vstack([np.ones(n), R.T]))  # (d, n) barycentric weights
    scaled = np.maximum(0.0, W.T / b1)
    totals = scaled.sum(axis=1)
    dead = totals <= 0.0
    if np.any(dead):
        flags.append(f"zero_membership_rows:{int(dead.sum())}")
        scaled[dead] = 1.0
        totals[dead] = float(d)
    Z = scaled / totals[:, None]
    Bbar = (b1[:, None] * T.T) @ np.diag(lam) @ (T * b1[None, :])
    Bbar = 0.5 * (Bbar + Bbar.T)
    return LayerSpectral(
        eigvals=lam, u1=U[:, 0].copy(), ratios=R, corner_rows=corner_rows,
        V=V, b1=b1, Z=Z, Bbar=Bbar, flags=flags,
    )


# ---------------------------------------------------------------------------
# cross-layer alignment and aggregation
# ---------------------------------------------------------------------------

def best_column_permutation(Z: np.ndarray, ref: np.ndarray) -> tuple[int, ...]:
    """Permutation pi minimizing ||Z[:, pi] - ref||_F^2 (exhaustive, d <= 8).

    Ties resolve to the lexicographically smallest permutation.
    """
    d = Z.shape[1]
    if d > MAX_ALIGN_DIM:
        raise AlignmentError(f"exhaustive alignment requires d <= {MAX_ALIGN_DIM}, got {d}")
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(d)):
        cost = float(((Z[:, perm] - ref) ** 2).sum())
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


def align_layers(layer_Z: list[np.ndarray]) -> list[tuple[int, ...]]:
    """Column permutations aligning every layer's memberships to layer 0."""
    d = layer_Z[0].shape[1]
    perms = [tuple(range(d))]
    for Z in layer_Z[1:]:
        perms.append(best_column_permutation(Z, layer_Z[0]))
    return perms


def estimate(
    network: MultilayerNetwork | np.ndarray,
    d: int,
    cfg: SpectralConfig | None = None,
    family: families.EdgeFamily | None = None,
) -> SpectralEstimate:
    """Full spectral pipeline: per-layer estimates, alignment, aggregation,
    degree corrections, block means, working interval, and label alignment.

    ``network`` may be a MultilayerNetwork or a raw (m, n, n) array (in which
    case ``family`` must be given).
    """
    cfg = cfg or SpectralConfig()
    if isinstance(network, MultilayerNetwork):
        layers_arr, fam = network.layers, network.family
    else:
        layers_arr = np.asarray(network, dtype=np.float64)
        if layers_arr.ndim == 2:
            layers_arr = layers_arr[None]
        if family is None:
            raise ValueError("family is required when passing a raw array")
        fam = family
    m, n = layers_arr.shape[0], layers_arr.shape[1]
    layers = [layer_mixed_score(layers_arr[t], d, cfg) for t in range(m)]
    perms = align_layers([ls.Z for ls in layers])
    flags = [f"layer{t}:{f}" for t, ls in enumerate(layers) for f in ls.flags]

    Zsum = np.zeros((n, d))
    for ls, perm in zip(layers, perms):
        Zsum += ls.Z[:, perm]
    Ztilde = Zsum / m
    Ztilde = Ztilde / Ztilde.sum(axis=1, keepdims=True)

    theta_floor = cfg.theta_floor
    if theta_floor is None:
        theta_floor = families.BERNOULLI_INTERVAL[0] if fam.kind == families.BERNOULLI else families.COUNT_LOWER
    Theta = np.empty((n, m))
    B = np.empty((m, d, d))
    n_clamped = 0
    for t, (ls, perm) in enumerate(zip(layers, perms)):
        perm = np.asarray(perm)
        denom = Ztilde @ ls.b1[perm]
        with np.errstate(divide="ignore", invalid="ignore"):
            th = ls.u1 / denom
        bad = ~np.isfinite(th) | (th < theta_floor)
        n_clamped += int(bad.sum())
        th[bad] = theta_floor
        Theta[:, t] = th
        B[t] = ls.Bbar[np.ix_(perm, perm)]
    if n_clamped:
        flags.append(f"theta_clamped:{n_clamped}")

    est = SpectralEstimate(
        Z=Ztilde, Theta=Theta, B=B, family=fam, interval=fam.interval,
        perms=perms, label_perm=tuple(range(d)), flags=flags, layers=layers,
    )
    pmax = float(max(preliminary_means(est, t).max() for t in range(m)))
    est.interval = families.default_interval(fam.kind, None if fam.kind == families.BERNOULLI else pmax)
    if cfg.label_align and d > 1:
        est = label_align(est, cfg.tau)
    return est


def preliminary_means(est: SpectralEstimate, t: int) -> np.ndarray:
    """Plug-in mean matrix of layer t from the preliminary estimates."""
    M = est.Theta[:, t][:, None] * est.Z
    P = M @ est.B[t] @ M.T
    return 0.5 * (P + P.T)


def assist_vectors(est: SpectralEstimate) -> np.ndarray:
    """The (m, n, d) tensor y_j^(t) = B^(t) z_j theta_j^(t) used by the
    spectral-assisted likelihood."""
    return np.einsum("tab,jb,jt->tja", est.B, est.Z, est.Theta)


def label_align(est: SpectralEstimate, tau: float | None = None) -> SpectralEstimate:
    """Relabel communities by their first (lowest-index) pure vertex.

    A vertex is pure for community k when ||z_i - e_k||_2 < tau (default
    n^(-1/3)).  If some community has no pure vertex the threshold escalates
    by factors of 1.5 up to 0.5 before failing.
    """
    n, d = est.Z.shape
    tau0 = float(tau) if tau is not None else n ** (-1.0 / 3.0)
    tau_k = min(tau0, 0.5)
    flags = list(est.flags)
    anchors = None
    while True:
        ok = True
        cand = np.empty(d, dtype=np.int64)
        for k in range(d):
            dist2 = ((est.Z - np.eye(d)[k]) ** 2).sum(axis=1)
            hits = np.flatnonzero(dist2 < tau_k * tau_k)
            if hits.size == 0:
                ok = False
                break
            cand[k] = hits[0]
        if ok:
            anchors = cand
            break
        if tau_k >= 0.5:
            break
        tau_k = min(tau_k * 1.5, 0.5)
    if anchors is None:
        raise AlignmentError(f"no pure vertex found for some community up to tau = 0.5 (started {tau0:.4g})")
    if tau_k != tau0:
        flags.append(f"label_tau_escalated:{tau_k:.6g}")
    order = tuple(int(i) for i in np.argsort(anchors, kind="stable"))
    perm = np.asarray(order)
    return replace(
        est,
        Z=est.Z[:, perm],
        B=est.B[:, perm][:, :, perm],
        perms=[tuple(int(p[o]) for o in order) for p in (np.asarray(q) for q in est.perms)],
        label_perm=order,
        flags=flags,
    )
