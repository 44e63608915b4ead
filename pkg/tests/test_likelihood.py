"""Vertex-likelihood tests: assembly, values against a direct scipy oracle,
gradients against finite differences, curvature blocks, and dispersion."""

import math

import numpy as np
import pytest
import scipy.stats

from mixmem import families, transforms
from mixmem.generate import ModelParams, mean_matrix, sample_network
from mixmem.likelihood import (
    CLIP_MARGIN,
    FisherBlocks,
    VertexProblem,
    build_vertex_problem,
    empirical_fisher,
    fisher_init_all,
    nb_profile_dispersion,
    spectral_loglik,
    structured_factor,
    transformed_loglik_and_grad,
    uniform_prior_nu,
    uniform_prior_x,
)
from mixmem.spectral import SpectralEstimate, assist_vectors, estimate

POISSON = families.EdgeFamily(families.POISSON)


def tiny_estimate(rng, n=6, d=2, m=2, family=POISSON, interval=(0.05, 4.0)):
    """A hand-sized SpectralEstimate with fully controlled values."""
    Z = rng.dirichlet(np.ones(d), size=n)
    Theta = rng.uniform(0.4, 1.2, size=(n, m))
    B = np.empty((m, d, d))
    for t in range(m):
        M = rng.uniform(0.1, 0.4, size=(d, d))
        B[t] = 0.5 * (M + M.T) + np.eye(d) * (1.0 - np.diag(M))
        np.fill_diagonal(B[t], 1.0)
    return SpectralEstimate(
        Z=Z, Theta=Theta, B=B, family=family, interval=interval,
        perms=[tuple(range(d))] * m, label_perm=tuple(range(d)),
    )


def tiny_network(rng, est, seed=0):
    from mixmem.generate import MultilayerNetwork

    n, m = est.n, est.m
    local = np.random.default_rng(seed)
    layers = np.empty((m, n, n))
    for t in range(m):
        mu = (est.Theta[:, t][:, None] * est.Z) @ est.B[t] @ (est.Theta[:, t][:, None] * est.Z).T
        raw = local.poisson(np.clip(mu, 1e-6, None))
        layers[t] = np.triu(raw) + np.triu(raw, 1).T
    return MultilayerNetwork(layers=layers.astype(np.float64), family=est.family)


def oracle_loglik(problem, z_star, theta):
    """Direct scipy evaluation of the assisted log-likelihood."""
    z = transforms.kappa(z_star)
    lo, hi = problem.interval[0] + CLIP_MARGIN, problem.interval[1] - CLIP_MARGIN
    total = 0.0
    for t in range(problem.m):
        mu = np.clip(theta[t] * (z @ problem.Yt[t]), lo, hi)
        if problem.family.kind == families.POISSON:
            total += scipy.stats.poisson.logpmf(problem.A[t], mu).sum()
        elif problem.family.kind == families.BERNOULLI:
            total += scipy.stats.bernoulli.logpmf(problem.A[t], mu).sum()
        else:
            rho = problem.rho[t]
            total += scipy.stats.nbinom.logpmf(problem.A[t], rho, rho / (mu + rho)).sum()
    return float(total)


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

class TestBuildVertexProblem:
    def test_shapes_and_data_rows(self, rng):
        est = tiny_estimate(rng)
        net = tiny_network(rng, est)
        pb = build_vertex_problem(net, est, 2)
        assert pb.A.shape == (est.m, est.n)
        np.testing.assert_array_equal(pb.A, net.layers[:, 2, :])
        assert pb.Yt.shape == (est.m, est.d, est.n)
        np.testing.assert_allclose(
            np.swapaxes(pb.Yt, 1, 2), assist_vectors(est), atol=1e-15
        )

    def test_nonzero_index_structure(self, rng):
        est = tiny_estimate(rng)
        net = tiny_network(rng, est)
        pb = build_vertex_problem(net, est, 0)
        for t in range(pb.m):
            cols = pb.nz_idx[pb.nz_ptr[t]:pb.nz_ptr[t + 1]]
            np.testing.assert_array_equal(cols, np.flatnonzero(pb.A[t]))

    def test_logh_constant_matches_poisson(self, rng):
        est = tiny_estimate(rng)
        net = tiny_network(rng, est)
        pb = build_vertex_problem(net, est, 1)
        expect = -scipy.special.gammaln(pb.A + 1.0).sum()
        assert pb.logh_const == pytest.approx(expect, rel=1e-12)

    def test_init_points_track_estimate(self, rng):
        est = tiny_estimate(rng)
        net = tiny_network(rng, est)
        i = 3
        pb = build_vertex_problem(net, est, i)
        np.testing.assert_allclose(transforms.free_to_membership(pb.x0), est.Z[i], atol=1e-9)
        np.testing.assert_allclose(
            transforms.real_to_interval(pb.nu0, pb.interval), est.Theta[i], atol=1e-9
        )

    def test_saturated_init_flagged(self, rng):
        est = tiny_estimate(rng)
        est.Z[4] = [1.0, 0.0]  # pure row saturates the stick coordinates
        net = tiny_network(rng, est)
        pb = build_vertex_problem(net, est, 4)
        assert "init_membership_saturated" in pb.flags

    def test_scale(self, rng):
        est = tiny_estimate(rng)
        net = tiny_network(rng, est)
        pb = build_vertex_problem(net, est, 0)
        assert pb.scale == pytest.approx(1.0 / math.sqrt(pb.m * pb.n))


# ---------------------------------------------------------------------------
# likelihood values
# ---------------------------------------------------------------------------

class TestLoglikValues:
    @pytest.mark.parametrize("kind", [families.POISSON, families.BERNOULLI, families.NEGBINOMIAL])
    def test_matches_scipy_oracle(self, rng, kind):
        interval = (0.01, 0.99) if kind == families.BERNOULLI else (0.05, 4.0)
        kwargs = {"dispersion": np.array([2.0, 3.0])} if kind == families.NEGBINOMIAL else {}
        fam = families.EdgeFamily(kind, interval=interval, **kwargs)
        est = tiny_estimate(rng, family=fam, interval=interval)
        if kind == families.BERNOULLI:
            est.Theta *= 0.5  # keep means inside (0, 1)
        net = tiny_network(rng, est)
        if kind == families.BERNOULLI:
            net.layers[:] = (net.layers > 0).astype(float)
        pb = build_vertex_problem(net, est, 2)
        for _ in range(5):
            z_star = rng.uniform(0.1, 0.8, size=est.d - 1)
            theta = rng.uniform(0.3, 0.9, size=est.m)
            got = spectral_loglik(pb, z_star, theta)
            want = oracle_loglik(pb, z_star, theta)
            assert got == pytest.approx(want, rel=1e-10)

    def test_transformed_value_consistent_with_z_space(self, rng):
        est = tiny_estimate(rng)
        net = tiny_network(rng, est)
        pb = build_vertex_problem(net, est, 1)
        for _ in range(5):
            x = rng.uniform(-1.5, 1.5, size=est.d - 1)
            nu = rng.uniform(-1.5, 1.5, size=est.m)
            val, _, _ = transformed_loglik_and_grad(pb, x, nu)
            z_star = transforms.stick_to_simplex(x)
            theta = transforms.real_to_interval(nu, pb.interval)
            assert val == pytest.approx(spectral_loglik(pb, z_star, theta), rel=1e-10)

    def test_clip_value_no_gradient(self, rng):
        # push every mean beyond the upper clip: value finite, gradient zero
        est = tiny_estimate(rng, interval=(0.05, 0.5))
        est.Theta[:] = 5.0
        est.B[:] *= 10.0
        net = tiny_network(rng, tiny_estimate(rng))
        pb = build_vertex_problem(net, est, 0)
        x = np.zeros(est.d - 1)
        nu = np.full(est.m, 3.0)  # theta near the top of the interval
        val, gx, gnu = transformed_loglik_and_grad(pb, x, nu)
        assert np.isfinite(val)
        np.testing.assert_allclose(gx, 0.0, atol=1e-12)
        np.testing.assert_allclose(gnu, 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def fd_gradient(f, u, h=1e-6):
    g = np.empty_like(u)
    for k in range(u.size):
        up, dn = u.copy(), u.copy()
        up[k] += h
        dn[k] -= h
        g[k] = (f(up) - f(dn)) / (2 * h)
    return g


class TestGradients:
    @pytest.mark.parametrize("kind", [families.POISSON, families.BERNOULLI, families.NEGBINOMIAL])
    def test_finite_differences(self, rng, kind):
        interval = (0.01, 0.99) if kind == families.BERNOULLI else (0.05, 4.0)
        kwargs = {"dispersion": np.array([2.0, 3.0])} if kind == families.NEGBINOMIAL else {}
        fam = families.EdgeFamily(kind, interval=interval, **kwargs)
        est = tiny_estimate(rng, family=fam, interval=interval)
        if kind == families.BERNOULLI:
            est.Theta *= 0.5
        net = tiny_network(rng, est)
        if kind == families.BERNOULLI:
            net.layers[:] = (net.layers > 0).astype(float)
        pb = build_vertex_problem(net, est, 3)
        for _ in range(8):
            x = rng.uniform(-1.2, 1.2, size=est.d - 1)
            nu = rng.uniform(-1.2, 1.2, size=est.m)
            _, gx, gnu = transformed_loglik_and_grad(pb, x, nu)
            fx = fd_gradient(lambda u: transformed_loglik_and_grad(pb, u, nu)[0], x)
            fn = fd_gradient(lambda u: transformed_loglik_and_grad(pb, x, u)[0], nu)
            scale = max(1.0, np.abs(gx).max())
            np.testing.assert_allclose(gx, fx, rtol=0, atol=2e-5 * scale)
            scale = max(1.0, np.abs(gnu).max())
            np.testing.assert_allclose(gnu, fn, rtol=0, atol=2e-5 * scale)

    def test_prior_gradients(self, rng):
        logp_x, grad_x = uniform_prior_x(4)
        logp_nu, grad_nu = uniform_prior_nu(3)
        for _ in range(10):
            x = rng.uniform(-2, 2, size=3)
            nu = rng.uniform(-2, 2, size=3)
            np.testing.assert_allclose(
                grad_x(x), fd_gradient(lambda u: logp_x(u), x), atol=1e-6
            )
            np.testing.assert_allclose(
                grad_nu(nu), fd_gradient(lambda u: logp_nu(u), nu), atol=1e-6
            )

    def test_uniform_prior_x_is_normalized_density_pushforward(self, rng):
        # Monte Carlo: x drawn by transforming uniform simplex samples has
        # log-density logp_x (checked via importance identity on a box)
        logp_x, _ = uniform_prior_x(2)
        # for d=2 the density of x = logit(z1) under z1 ~ U(0,1) is
        # sigmoid'(x) = s(1-s)
        for x in (-1.0, 0.0, 0.7):
            s = 1.0 / (1.0 + math.exp(-x))
            assert logp_x(np.array([x])) == pytest.approx(math.log(s * (1 - s)), abs=1e-12)


# ---------------------------------------------------------------------------
# Fisher curvature blocks
# ---------------------------------------------------------------------------

class TestFisher:
    def test_arrow_structure(self, rng):
        est = tiny_estimate(rng, n=8, d=3, m=4)
        fb = empirical_fisher(est, 2)
        k = est.d - 1
        Gamma = fb.Gamma
        assert Gamma.shape == (k + est.m, k + est.m)
        np.testing.assert_allclose(Gamma, Gamma.T, atol=1e-12)
        # degree block is diagonal
        off = Gamma[k:, k:] - np.diag(np.diag(Gamma[k:, k:]))
        np.testing.assert_allclose(off, 0.0, atol=1e-15)

    def test_delta_annihilates_membership(self, rng):
        est = tiny_estimate(rng, n=8, d=3, m=3)
        i = 1
        fb = empirical_fisher(est, i)
        for t in range(est.m):
            np.testing.assert_allclose(fb.Delta[t] @ est.Z[i], 0.0, atol=1e-10)
            eig = np.linalg.eigvalsh(fb.Delta[t])
            assert eig.min() > -1e-10

    def test_structured_factor_inverts_gamma(self, rng):
        for d, m in [(2, 2), (3, 5), (4, 10)]:
            est = tiny_estimate(rng, n=10, d=d, m=m)
            fb = empirical_fisher(est, 0)
            L, M, D = structured_factor(fb.Gamma, d)
            k = d - 1
            F = np.zeros((k + m, k + m))
            F[:k, :k] = L
            F[k:, :k] = -M @ L
            F[k:, k:] = D
            np.testing.assert_allclose(
                F @ F.T, np.linalg.inv(fb.Gamma), rtol=0,
                atol=1e-8 * np.linalg.norm(np.linalg.inv(fb.Gamma)),
            )
            assert np.all(np.diag(L) > 0)
            np.testing.assert_allclose(L, np.tril(L), atol=0)

    def test_fisher_init_matches_per_vertex(self, rng):
        est = tiny_estimate(rng, n=7, d=3, m=3)
        Ls, flags = fisher_init_all(est)
        for i in (0, 3, 6):
            fb = empirical_fisher(est, i)
            np.testing.assert_allclose(Ls[i], fb.L, atol=1e-12)
        assert all(f == [] for f in flags)

    def test_d1_rejected(self, rng):
        est = tiny_estimate(rng, d=2)
        one = SpectralEstimate(
            Z=np.ones((4, 1)), Theta=np.ones((4, 2)), B=np.ones((2, 1, 1)),
            family=POISSON, interval=(0.05, 2.0), perms=[(0,), (0,)], label_perm=(0,),
        )
        with pytest.raises(ValueError):
            empirical_fisher(one, 0)


# ---------------------------------------------------------------------------
# negative binomial profile dispersion
# ---------------------------------------------------------------------------

class TestDispersion:
    def test_profile_value_matches_scipy(self, rng):
        n = 12
        mu = rng.uniform(0.5, 2.0, size=(n, n))
        mu = 0.5 * (mu + mu.T)
        rho0 = 2.0
        iu = np.triu_indices(n)
        p = rho0 / (mu[iu] + rho0)
        a = np.zeros((n, n))
        a[iu] = scipy.stats.nbinom.rvs(rho0, p, random_state=np.random.RandomState(7))
        a = np.triu(a) + np.triu(a, 1).T
        rhos, flags = nb_profile_dispersion(a, mu)
        # the returned maximizer beats nearby dispersions in scipy likelihood
        def ll(r):
            return scipy.stats.nbinom.logpmf(a[iu], r, r / (mu[iu] + r)).sum()

        r = rhos[0]
        assert ll(r) >= ll(r * 1.05) - 1e-9
        assert ll(r) >= ll(r * 0.95) - 1e-9

    def test_recovers_known_dispersion(self, rng):
        n = 150
        mu = np.full((n, n), 1.2)
        rho0 = 2.0
        iu = np.triu_indices(n)
        a = np.zeros((n, n))
        a[iu] = scipy.stats.nbinom.rvs(
            rho0, rho0 / (1.2 + rho0), size=iu[0].size, random_state=np.random.RandomState(3)
        )
        a = np.triu(a) + np.triu(a, 1).T
        rhos, flags = nb_profile_dispersion(a, mu)
        assert 1.7 < rhos[0] < 2.3
        assert flags == []

    def test_underdispersed_data_hits_upper_boundary(self):
        # constant data has zero variance: the profile likelihood increases
        # toward the Poisson limit, pinning rho at the upper bracket
        n = 30
        mu = np.full((n, n), 1.0)
        a = np.ones((n, n))
        rhos, flags = nb_profile_dispersion(a, mu, bounds=(1e-2, 1e3))
        assert any(f.startswith("dispersion_at_boundary") for f in flags)
        assert rhos[0] > 0.99e3

    def test_nonpositive_means_rejected(self):
        with pytest.raises(families.DomainError):
            nb_profile_dispersion(np.ones((3, 3)), np.zeros((3, 3)))

    def test_multi_layer_shapes(self, rng):
        n = 10
        mu = np.abs(rng.uniform(0.5, 1.5, size=(2, n, n)))
        mu = 0.5 * (mu + np.swapaxes(mu, 1, 2))
        a = np.random.RandomState(5).poisson(mu).astype(float)
        a = np.triu(a) + np.swapaxes(np.triu(a, 1), 1, 2)
        rhos, _ = nb_profile_dispersion(a, mu)
        assert rhos.shape == (2,)
