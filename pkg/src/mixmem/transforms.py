"""Bijective reparameterizations between constrained and free coordinates.

A membership vector z on the simplex S^{d-1} = {z >= 0, sum z = 1} is handled
through two maps:

* ``kappa``: the reduced vector z* (first d-1 coordinates) <-> z, via
  z = J z* + e_d with J = [I_{d-1}; -1^T].  Its inverse simply drops the
  last coordinate.
* ``stick_to_simplex`` (T_z): an unconstrained x in R^{d-1} -> z* through a
  stick-breaking construction,

      z*_k = prod_{l<k} sigmoid(x_l) * (1 - sigmoid(x_k)),  k = 1..d-1,

  whose Jacobian is lower triangular, giving a closed-form log-determinant.

Degree corrections theta in the open interval I = (lo, hi) are mapped from
free nu in R^m by the scaled logistic ``interval_to_real`` family of maps:

      theta_t = lo + (hi - lo) * sigmoid(nu_t).

Inverse maps saturate at +/-X_MAX = 30 when the constrained point touches the
boundary; callers can detect this via the ``saturated`` helper outputs.
"""

from __future__ import annotations

import numpy as np

#: Free-coordinate saturation bound for inverse transforms at the boundary.
X_MAX = 30.0


def sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


# ---------------------------------------------------------------------------
# kappa: reduced coordinates <-> simplex vector
# ---------------------------------------------------------------------------

def kappa(z_star) -> np.ndarray:
    """Full simplex vector from its first d-1 coordinates."""
    z_star = np.asarray(z_star, dtype=np.float64)
    tail = 1.0 - z_star.sum(axis=-1, keepdims=True)
    return np.concatenate([z_star, tail], axis=-1)


def kappa_inv(z) -> np.ndarray:
    """First d-1 coordinates of a simplex vector.

    Equals (J^T J)^{-1} J^T (z - e_d) for J = [I; -1^T], which collapses to
    dropping the last coordinate when z sums to one.
    """
    z = np.asarray(z, dtype=np.float64)
    return z[..., :-1].copy()


def kappa_matrix(d: int) -> np.ndarray:
    """The d x (d-1) matrix J with z = J z* + e_d."""
    J = np.zeros((d, d - 1))
    J[: d - 1, :] = np.eye(d - 1)
    J[d - 1, :] = -1.0
    return J


# ---------------------------------------------------------------------------
# T_z: free coordinates <-> reduced simplex coordinates (stick breaking)
# ---------------------------------------------------------------------------

def stick_to_simplex(x) -> np.ndarray:
    """T_z: map free x in R^{d-1} to z* (first d-1 simplex coordinates)."""
    x = np.asarray(x, dtype=np.float64)
    s = sigmoid(x)
    # cumulative stick remaining before breaking at k: prod_{l<k} sigmoid(x_l)
    cum = np.cumprod(s, axis=-1)
    before = np.concatenate([np.ones_like(cum[..., :1]), cum[..., :-1]], axis=-1)
    return before * (1.0 - s)


def simplex_to_stick(z_star) -> tuple[np.ndarray, bool]:
    """Inverse of T_z.  Returns (x, saturated).

    Coordinates where the stick fraction degenerates to 0 or 1 (or the stick
    is already exhausted) are clamped to +/-X_MAX and reported through the
    ``saturated`` flag, as are finite values beyond +/-X_MAX.
    """
    z = np.asarray(z_star, dtype=np.float64)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    nrow, k = zb.shape
    x = np.empty_like(zb)
    remaining = np.ones(nrow)
    saturated = False
    for j in range(k):
        zj = zb[:, j]
        ok = remaining > 0.0
        frac = zj / np.where(ok, remaining, 1.0)
        hi_bd = ok & (frac >= 1.0)
        interior = ok & (frac > 0.0) & (frac < 1.0)
        # sigmoid(x_j) = 1 - frac  =>  x_j = log((1 - frac) / frac)
        val = np.full(nrow, X_MAX)
        val[interior] = np.log1p(-frac[interior]) - np.log(frac[interior])
        val[hi_bd] = -X_MAX
        clipped = np.clip(val, -X_MAX, X_MAX)
        if np.any(~interior) or np.any(clipped != val):
            saturated = True
        x[:, j] = clipped
        remaining = remaining - zj
    return (x[0], saturated) if single else (x, saturated)


def stick_log_jacobian(x) -> np.ndarray:
    """log |det dT_z/dx|; the Jacobian is lower triangular."""
    x = np.asarray(x, dtype=np.float64)
    s = sigmoid(x)
    k = x.shape[-1]
    log_s = np.log(s)
    log_1ms = np.log1p(-s)
    # diagonal entries: prod_{l<k} s_l * s_k * (1 - s_k)
    weights = (k - 1.0) - np.arange(k)  # s_j appears in k-1-j later prefixes
    return (log_s + log_1ms + weights * log_s).sum(axis=-1)


def stick_jacobian_matrix(x) -> np.ndarray:
    """Dense (d-1) x (d-1) Jacobian dz*/dx (lower triangular)."""
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[-1]
    s = sigmoid(x)
    cum = np.cumprod(s)
    before = np.concatenate([[1.0], cum[:-1]])
    z_star = before * (1.0 - s)
    M = np.zeros((k, k))
    for a in range(k):
        M[a, a] = -before[a] * s[a] * (1.0 - s[a])
        for b in range(a):
            M[a, b] = z_star[a] * (1.0 - s[b])
    return M


# ---------------------------------------------------------------------------
# T_theta: free coordinates <-> interval-constrained degree corrections
# ---------------------------------------------------------------------------

def real_to_interval(nu, interval) -> np.ndarray:
    """T_theta: map free nu to theta in the open interval (lo, hi)."""
    lo, hi = float(interval[0]), float(interval[1])
    return lo + (hi - lo) * sigmoid(np.asarray(nu, dtype=np.float64))


def interval_to_real(theta, interval) -> tuple[np.ndarray, bool]:
    """Inverse of T_theta.  Returns (nu, saturated)."""
    lo, hi = float(interval[0]), float(interval[1])
    theta = np.asarray(theta, dtype=np.float64)
    frac = (theta - lo) / (hi - lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.log(frac) - np.log1p(-frac)
    bad = ~np.isfinite(nu) | (np.abs(nu) > X_MAX)
    saturated = bool(np.any(bad))
    if saturated:
        signs = np.where(np.isnan(nu), np.sign(frac - 0.5), np.sign(nu))
        signs = np.where(signs == 0.0, 1.0, signs)
        nu = np.where(bad, signs * X_MAX, nu)
    return nu, saturated


def interval_log_jacobian(nu, interval) -> np.ndarray:
    """log |det dT_theta/dnu| summed over coordinates."""
    lo, hi = float(interval[0]), float(interval[1])
    nu = np.asarray(nu, dtype=np.float64)
    s = sigmoid(nu)
    return (np.log(hi - lo) + np.log(s) + np.log1p(-s)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Composite helpers used by point estimation and credible regions
# ---------------------------------------------------------------------------

def free_to_membership(x) -> np.ndarray:
    """kappa(T_z(x)): free coordinates to a full membership vector."""
    return kappa(stick_to_simplex(x))


def membership_to_free(z) -> tuple[np.ndarray, bool]:
    """T_z^{-1}(kappa^{-1}(z)): membership vector to free coordinates."""
    return simplex_to_stick(kappa_inv(z))
