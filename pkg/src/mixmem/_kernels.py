"""Compiled kernels: assisted-likelihood evaluation and the variational fit.

These are scalar-loop implementations designed for numba; the public API in
``likelihood`` and ``vi`` wraps them.  All math here mirrors the formulas in
``transforms``/``likelihood`` exactly — property tests cross-check the two.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

#: objective guard used when a log of a non-positive scale is needed
_TINY = 1e-300

#: value-safe fast-math subset: allows reassociation/contraction so the hot
#: loops vectorize, but keeps NaN/Inf semantics and exact division
_FASTMATH = {"reassoc", "contract", "nsz"}


@njit(cache=True, nogil=True, inline="always", fastmath=_FASTMATH)
def _sigmoid(u):
    if u >= 0.0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@njit(cache=True, nogil=True, fastmath=_FASTMATH)
def _sample_loglik(x, nu, A, Yt, nz_ptr, nz_idx, fam_code, rho,
                   lo, hi, clip_lo, clip_hi, logh_const, gx, gnu, wbuf, rbuf,
                   mbuf):
    """Log-likelihood value and free-coordinate gradients for one sample.

    Writes the gradients into ``gx`` (d-1,) and ``gnu`` (m,); returns
    (value, number of clipped means).
    """
    m = A.shape[0]
    n = A.shape[1]
    d = Yt.shape[1]
    k = d - 1
    # stick-breaking membership transform
    z = np.empty(d)
    sig = np.empty(k)
    cum = 1.0
    for a in range(k):
        s = _sigmoid(x[a])
        sig[a] = s
        z[a] = cum * (1.0 - s)
        cum *= s
    z[k] = cum
    value = logh_const
    nclip = 0
    gz = np.zeros(d)
    for t in range(m):
        st = _sigmoid(nu[t])
        th = lo + (hi - lo) * st
        rho_t = rho[t]
        for j in range(n):
            wbuf[j] = 0.0
        for a in range(d):
            za = z[a]
            for j in range(n):
                wbuf[j] += za * Yt[t, a, j]
        gth = 0.0
        if fam_code == 1:  # poisson
            # zero counts contribute g = -1 (interior) with no division; the
            # division and the log run only over the stored nonzero entries
            musum = 0.0
            for j in range(n):
                mu_raw = th * wbuf[j]
                mu = min(max(mu_raw, clip_lo), clip_hi)
                interior = 1.0 if mu == mu_raw else 0.0
                nclip += 1 - int(interior)
                musum += mu
                mbuf[j] = mu
                rbuf[j] = -interior
                gth -= interior * wbuf[j]
            value -= musum
            for q in range(nz_ptr[t], nz_ptr[t + 1]):
                j = nz_idx[q]
                mu = mbuf[j]
                value += A[t, j] * math.log(mu)
                if rbuf[j] != 0.0:
                    g = (A[t, j] - mu) / mu
                    gth += (g - rbuf[j]) * wbuf[j]
                    rbuf[j] = g
        elif fam_code == 0:  # bernoulli
            for j in range(n):
                mu_raw = th * wbuf[j]
                mu = min(max(mu_raw, clip_lo), clip_hi)
                interior = 1.0 if mu == mu_raw else 0.0
                nclip += 1 - int(interior)
                aij = A[t, j]
                value += aij * math.log(mu) + (1.0 - aij) * math.log1p(-mu)
                g = interior * (aij - mu) / (mu * (1.0 - mu))
                rbuf[j] = g
                gth += g * wbuf[j]
        else:  # negative binomial
            lr = math.log(rho_t)
            for j in range(n):
                mu_raw = th * wbuf[j]
                mu = min(max(mu_raw, clip_lo), clip_hi)
                interior = 1.0 if mu == mu_raw else 0.0
                nclip += 1 - int(interior)
                aij = A[t, j]
                if aij != 0.0:
                    value += aij * math.log(mu)
                value += -(aij + rho_t) * math.log(mu + rho_t) + rho_t * lr
                g = interior * rho_t * (aij - mu) / (mu * (mu + rho_t))
                rbuf[j] = g
                gth += g * wbuf[j]
        for a in range(d):
            acc = 0.0
            for j in range(n):
                acc += rbuf[j] * Yt[t, a, j]
            gz[a] += th * acc
        gnu[t] = gth * (hi - lo) * st * (1.0 - st)
    # chain rule: z* block of kappa, then the stick transform
    before = np.empty(k)
    b = 1.0
    for a in range(k):
        before[a] = b
        b *= sig[a]
    for l in range(k):
        acc = -(gz[l] - gz[k]) * before[l] * sig[l] * (1.0 - sig[l])
        oml = 1.0 - sig[l]
        for a in range(l + 1, k):
            acc += (gz[a] - gz[k]) * z[a] * oml
        gx[l] = acc
    return value, nclip


@njit(cache=True, nogil=True, fastmath=_FASTMATH)
def loglik_batch(X, NU, A, Yt, nz_ptr, nz_idx, fam_code, rho,
                 lo, hi, clip_lo, clip_hi, logh_const):
    """Batched assisted log-likelihood: values and gradients per sample."""
    s = X.shape[0]
    k = X.shape[1]
    m = NU.shape[1]
    n = A.shape[1]
    V = np.empty(s)
    GX = np.empty((s, k))
    GNU = np.empty((s, m))
    wbuf = np.empty(n)
    rbuf = np.empty(n)
    mbuf = np.empty(n)
    nclip = 0
    for r in range(s):
        v, nc = _sample_loglik(X[r], NU[r], A, Yt, nz_ptr, nz_idx, fam_code, rho,
                               lo, hi, clip_lo, clip_hi, logh_const,
                               GX[r], GNU[r], wbuf, rbuf, mbuf)
        V[r] = v
        nclip += nc
    return V, GX, GNU, nclip


@njit(cache=True, nogil=True, fastmath=_FASTMATH)
def _add_uniform_prior(x, nu, d, gx, gnu):
    """Uniform-membership / uniform-degree induced log-priors (in place)."""
    k = d - 1
    v = math.lgamma(d)
    for a in range(k):
        s = _sigmoid(x[a])
        w = (k - 1.0) - a
        v += math.log(s) + math.log1p(-s) + w * math.log(s)
        gx[a] += 1.0 - 2.0 * s + w * (1.0 - s)
    for t in range(nu.shape[0]):
        s = _sigmoid(nu[t])
        v += math.log(s) + math.log1p(-s)
        gnu[t] += 1.0 - 2.0 * s
    return v


@njit(cache=True, nogil=True, inline="always", fastmath=_FASTMATH)
def _scaled_inverse(v, cn):
    """Smooth surrogate for 1/v that stays finite and positive for v <= 0."""
    if v > 0.0:
        return cn / (cn * v + 1.0)
    return cn - cn * cn * v


@njit(cache=True, nogil=True, fastmath=_FASTMATH)
def fit_chunk(p, m1, m2, ring, state, it0, EPS, A, Yt, nz_ptr, nz_idx,
              fam_code, rho, lo, hi, clip_lo, clip_hi, logh_const,
              scale, cn, alpha0, beta1, beta2, eps0, ema_decay,
              tol_rel, div_factor, window, max_iter, blockdiag):
    """Run up to one chunk of Adam iterations on the noisy objective.

    Parameter vector layout: [mu1 (k) | mu2 (m) | L lower triangle row-major
    (k(k+1)/2) | M row-major (m*k) | sigma (m)].  ``state`` carries
    [ema, ema_initialized, status, iterations_done, last_objective,
    last_clip_fraction] across chunks; status 0 = running, 1 = converged,
    2 = diverged.  ``ring[0]`` holds the EMA at the previous window boundary.
    """
    nchunk = EPS.shape[0]
    s = EPS.shape[1]
    m = A.shape[0]
    n = A.shape[1]
    d = Yt.shape[1]
    k = d - 1
    nL = k * (k + 1) // 2
    off_L = k + m
    off_M = off_L + nL
    off_s = off_M + m * k
    npar = off_s + m

    L = np.empty((k, k))
    Le = np.empty(k)
    x = np.empty(k)
    nu = np.empty(m)
    gx = np.empty(k)
    gnu = np.empty(m)
    mg = np.empty(k)
    gacc = np.empty(npar)
    wbuf = np.empty(n)
    rbuf = np.empty(n)
    mbuf = np.empty(n)

    ema = state[0]
    have = state[1] > 0.5
    status = 0.0
    git = int(it0)
    denom_terms = float(max(1, s * m * n))
    for local in range(nchunk):
        if git >= max_iter:
            break
        git += 1
        c = off_L
        for a in range(k):
            for b2 in range(a + 1):
                L[a, b2] = p[c]
                c += 1
            for b2 in range(a + 1, k):
                L[a, b2] = 0.0
        for c in range(npar):
            gacc[c] = 0.0
        Fdata = 0.0
        nclip = 0
        for r in range(s):
            for a in range(k):
                acc = 0.0
                for b2 in range(a + 1):
                    acc += L[a, b2] * EPS[local, r, b2]
                Le[a] = acc
                x[a] = p[a] + acc * scale
            for t in range(m):
                acc = 0.0
                for a in range(k):
                    acc += p[off_M + t * k + a] * Le[a]
                nu[t] = p[k + t] - acc * scale + p[off_s + t] * EPS[local, r, k + t] * scale
            v, nc = _sample_loglik(x, nu, A, Yt, nz_ptr, nz_idx, fam_code, rho,
                                   lo, hi, clip_lo, clip_hi, logh_const,
                                   gx, gnu, wbuf, rbuf, mbuf)
            v += _add_uniform_prior(x, nu, d, gx, gnu)
            Fdata += v
            nclip += nc
            for a in range(k):
                gacc[a] -= gx[a]
            for t in range(m):
                gacc[k + t] -= gnu[t]
            for a in range(k):
                acc = 0.0
                for t in range(m):
                    acc += p[off_M + t * k + a] * gnu[t]
                mg[a] = acc
            c = off_L
            for a in range(k):
                coef = (mg[a] - gx[a]) * scale
                for b2 in range(a + 1):
                    gacc[c] += coef * EPS[local, r, b2]
                    c += 1
            for t in range(m):
                gn_s = gnu[t] * scale
                for a in range(k):
                    gacc[off_M + t * k + a] += gn_s * Le[a]
                gacc[off_s + t] -= gnu[t] * EPS[local, r, k + t] * scale
        inv_s = 1.0 / s
        for c in range(npar):
            gacc[c] *= inv_s
        # entropy gradients, with 1/v replaced by the scaled inverse
        for a in range(k):
            c = off_L + a * (a + 1) // 2 + a
            gacc[c] -= _scaled_inverse(p[c], cn)
        for t in range(m):
            gacc[off_s + t] -= _scaled_inverse(p[off_s + t], cn)
        # objective value for the convergence monitor
        F = -Fdata * inv_s
        for a in range(k):
            v_ = abs(p[off_L + a * (a + 1) // 2 + a])
            F -= math.log(v_) if v_ > _TINY else math.log(_TINY)
        for t in range(m):
            v_ = abs(p[off_s + t])
            F -= math.log(v_) if v_ > _TINY else math.log(_TINY)
        state[4] = F
        state[5] = nclip / denom_terms
        if not math.isfinite(F):
            status = 2.0
            break
        if blockdiag == 1:
            for c in range(off_M, off_M + m * k):
                gacc[c] = 0.0
        bc1 = 1.0 - beta1 ** git
        bc2 = 1.0 - beta2 ** git
        for c in range(npar):
            g = gacc[c] * scale
            m1[c] = beta1 * m1[c] + (1.0 - beta1) * g
            m2[c] = beta2 * m2[c] + (1.0 - beta2) * g * g
            p[c] -= alpha0 * (m1[c] / bc1) / (math.sqrt(m2[c] / bc2) + eps0)
        if have:
            ema = ema_decay * ema + (1.0 - ema_decay) * F
        else:
            ema = F
            have = True
        # convergence/divergence checks compare the EMA against its value one
        # full window earlier, evaluated only at window boundaries
        if git % window == 0:
            if git > window:
                prev = ring[0]
                ref = max(1.0, abs(prev))
                if abs(ema - prev) < tol_rel * ref:
                    status = 1.0
                    ring[0] = ema
                    break
                if ema - prev > div_factor * ref:
                    status = 2.0
                    ring[0] = ema
                    break
            ring[0] = ema
    state[0] = ema
    state[1] = 1.0 if have else 0.0
    state[2] = status
    state[3] = git
