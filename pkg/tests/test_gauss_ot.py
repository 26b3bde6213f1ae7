import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthmvd.errors import NotPSD, SingularCovariance
from depthmvd.gauss_ot import (
    EPS_PSD,
    Gaussian2,
    Gaussian3,
    barycenter_n,
    barycenter_two,
    bhattacharyya_2d,
    gaussian_density,
    geodesic_interpolate,
    psd_sqrt,
    w2_squared,
    wasserstein_variance,
)

from conftest import rand_gaussian3, rand_pose, rand_spd


class TestGaussian3:
    def test_floors_eigenvalues(self):
        g = Gaussian3(np.zeros(3), np.zeros((3, 3)))
        assert np.linalg.eigvalsh(g.cov)[0] >= EPS_PSD * (1 - 1e-12)

    def test_symmetrizes(self, rng):
        raw = rand_spd(rng) + 1e-13 * rng.normal(size=(3, 3))
        g = Gaussian3(np.zeros(3), raw)
        assert np.linalg.norm(g.cov - g.cov.T) <= 1e-12

    def test_rejects_bad_weight_and_m(self):
        with pytest.raises(ValueError):
            Gaussian3(np.zeros(3), np.eye(3), weight=0.0)
        with pytest.raises(ValueError):
            Gaussian3(np.zeros(3), np.eye(3), m=-1.0)


class TestPsdSqrt:
    def test_diagonal(self):
        np.testing.assert_allclose(
            psd_sqrt(np.diag([4.0, 9.0, 16.0])), np.diag([2.0, 3.0, 4.0]), atol=1e-12
        )

    def test_identity(self):
        np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-12)

    def test_squaring_oracle(self, rng):
        for _ in range(50):
            s = rand_spd(rng, ev_lo=0.01, ev_hi=10.0)
            r = psd_sqrt(s)
            assert np.linalg.norm(r @ r - s) <= 1e-8 * np.linalg.norm(s)
            np.testing.assert_allclose(r, r.T)

    def test_not_psd(self):
        with pytest.raises(NotPSD):
            psd_sqrt(np.diag([1.0, 1.0, -0.5]))

    def test_asymmetric_rejected(self):
        m = np.eye(3)
        m[0, 1] = 0.5
        with pytest.raises(ValueError):
            psd_sqrt(m)


class TestW2Squared:
    def test_identity_of_indiscernibles(self, rng):
        g = rand_gaussian3(rng)
        assert w2_squared(g, g) == 0.0

    def test_commuting_closed_form(self):
        a = Gaussian3(np.zeros(3), np.eye(3))
        b = Gaussian3([1.0, 0, 0], np.diag([4.0, 1.0, 1.0]))
        # mean term 1, covariance term (2-1)^2 = 1
        assert abs(w2_squared(a, b) - 2.0) <= 1e-12

    def test_symmetry(self, rng):
        for _ in range(20):
            a, b = rand_gaussian3(rng), rand_gaussian3(rng)
            assert abs(w2_squared(a, b) - w2_squared(b, a)) <= 1e-8

    def test_triangle_inequality_sampled(self, rng):
        for _ in range(50):
            a, b, c = (rand_gaussian3(rng) for _ in range(3))
            dab = np.sqrt(w2_squared(a, b))
            dbc = np.sqrt(w2_squared(b, c))
            dac = np.sqrt(w2_squared(a, c))
            assert dac <= dab + dbc + 1e-6

    def test_zero_implies_equal(self, rng):
        # Construct pairs at tiny distance and confirm the converse direction.
        a = rand_gaussian3(rng)
        b = Gaussian3(a.mean.copy(), a.cov.copy())
        assert w2_squared(a, b) <= 1e-12
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-6)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-6)


class TestGeodesic:
    def test_equal_cov_midpoint(self, rng):
        cov = rand_spd(rng)
        a = Gaussian3(np.zeros(3), cov)
        b = Gaussian3([2.0, 0, 0], cov)
        mean, out_cov = geodesic_interpolate(a, b, 0.5)
        np.testing.assert_allclose(mean, [1.0, 0, 0])
        np.testing.assert_allclose(out_cov, cov, atol=1e-9)

    def test_endpoints(self, rng):
        a, b = rand_gaussian3(rng), rand_gaussian3(rng)
        mean0, cov0 = geodesic_interpolate(a, b, 0.0)
        np.testing.assert_allclose(mean0, a.mean)
        np.testing.assert_allclose(cov0, a.cov, atol=1e-9)
        mean1, cov1 = geodesic_interpolate(a, b, 1.0)
        np.testing.assert_allclose(mean1, b.mean)
        np.testing.assert_allclose(cov1, b.cov, atol=1e-6)

    def test_metric_midpoint_property(self, rng):
        for _ in range(10):
            a, b = rand_gaussian3(rng), rand_gaussian3(rng)
            mean, cov = geodesic_interpolate(a, b, 0.5)
            mid = Gaussian3(mean, cov)
            d = np.sqrt(w2_squared(a, b))
            np.testing.assert_allclose(np.sqrt(w2_squared(a, mid)), 0.5 * d, atol=1e-6)
            np.testing.assert_allclose(np.sqrt(w2_squared(mid, b)), 0.5 * d, atol=1e-6)

    def test_lambda_out_of_range(self, rng):
        a, b = rand_gaussian3(rng), rand_gaussian3(rng)
        with pytest.raises(ValueError):
            geodesic_interpolate(a, b, 1.5)


class TestBarycenter:
    def test_two_identical(self, rng):
        a = rand_gaussian3(rng)
        mean, cov = barycenter_two(a, a)
        np.testing.assert_allclose(mean, a.mean)
        np.testing.assert_allclose(cov, a.cov, atol=1e-9)

    def test_two_equal_covariances(self, rng):
        cov = rand_spd(rng)
        a, b = Gaussian3([0, 0, 0], cov), Gaussian3([1, 2, 3], cov)
        mean, out = barycenter_two(a, b)
        np.testing.assert_allclose(mean, [0.5, 1.0, 1.5])
        np.testing.assert_allclose(out, cov, atol=1e-9)

    def test_two_local_optimality(self, rng):
        # Oracle: grid perturbations of the returned mean/cov never improve
        # the barycenter objective.
        a, b = rand_gaussian3(rng), rand_gaussian3(rng)
        mean, cov = barycenter_two(a, b)

        def objective(m, c):
            g = Gaussian3(m, c)
            return 0.5 * (w2_squared(g, a) + w2_squared(g, b))

        base = objective(mean, cov)
        for _ in range(100):
            dm = rng.normal(scale=1e-3, size=3)
            ds = rng.normal(scale=1e-3, size=(3, 3))
            ds = 0.5 * (ds + ds.T)
            assert objective(mean + dm, cov + ds) >= base - 1e-6

    def test_n_identical_single_iteration(self, rng):
        a = rand_gaussian3(rng)
        gs = [Gaussian3(a.mean, a.cov) for _ in range(4)]
        res = barycenter_n(gs)
        assert res.converged and res.iterations == 1
        np.testing.assert_allclose(res.cov, a.cov, atol=1e-10)

    def test_n_equal_covariances_fixed_point(self, rng):
        cov = rand_spd(rng)
        gs = [Gaussian3(rng.normal(size=3), cov) for _ in range(5)]
        res = barycenter_n(gs)
        assert res.converged
        np.testing.assert_allclose(res.cov, cov, atol=1e-8)
        np.testing.assert_allclose(res.mean, np.mean([g.mean for g in gs], axis=0))

    def test_n2_matches_analytic(self, rng):
        for _ in range(10):
            a, b = rand_gaussian3(rng), rand_gaussian3(rng)
            mean2, cov2 = barycenter_two(a, b)
            res = barycenter_n([a, b])
            assert res.converged
            np.testing.assert_allclose(res.mean, mean2, atol=1e-9)
            np.testing.assert_allclose(res.cov, cov2, atol=1e-6)

    def test_permutation_invariance(self, rng):
        gs = [rand_gaussian3(rng) for _ in range(4)]
        res = barycenter_n(gs)
        shuffled = [gs[2], gs[0], gs[3], gs[1]]
        res2 = barycenter_n(shuffled)
        np.testing.assert_allclose(res.mean, res2.mean, atol=1e-8)
        np.testing.assert_allclose(res.cov, res2.cov, atol=1e-8)

    def test_bad_weights_rejected(self, rng):
        gs = [rand_gaussian3(rng) for _ in range(2)]
        with pytest.raises(ValueError):
            barycenter_n(gs, weights=[0.4, 0.4])
        with pytest.raises(ValueError):
            barycenter_n(gs, weights=[1.2, -0.2])


class TestWassersteinVariance:
    def test_identical_gaussians_zero(self, rng):
        a = rand_gaussian3(rng)
        gs = [Gaussian3(a.mean, a.cov) for _ in range(4)]
        assert wasserstein_variance(gs) <= 1e-12

    def test_single_input_zero(self, rng):
        assert wasserstein_variance([rand_gaussian3(rng)]) == 0.0

    def test_point_mass_pair(self):
        # Two near-point Gaussians 1 m apart: barycenter at the midpoint,
        # each 0.25 away in squared distance.
        eps = 1e-8
        a = Gaussian3([0, 0, 0], eps * np.eye(3))
        b = Gaussian3([1.0, 0, 0], eps * np.eye(3))
        assert abs(wasserstein_variance([a, b]) - 0.25) <= 1e-3

    def test_rigid_invariance(self, rng):
        from depthmvd.geometry import relative_transform, transform_gaussian

        gs = [rand_gaussian3(rng) for _ in range(3)]
        t = relative_transform(rand_pose(rng), rand_pose(rng))
        moved = [transform_gaussian(g, t) for g in gs]
        assert abs(wasserstein_variance(gs) - wasserstein_variance(moved)) <= 1e-8


class TestBhattacharyya:
    def test_identical(self, rng):
        cov = rand_spd(rng, dim=2)
        g = Gaussian2([3.0, 4.0], cov)
        assert bhattacharyya_2d(g, g) == 1.0

    def test_closed_form_hand_value(self):
        a = Gaussian2([0.0, 0.0], np.eye(2))
        b = Gaussian2([2.0, 0.0], np.eye(2))
        assert abs(bhattacharyya_2d(a, b) - np.exp(-0.5)) <= 1e-12

    def test_quadrature_oracle(self, rng):
        # Oracle: numeric integral of sqrt(p_a p_b) over a fine grid.
        a = Gaussian2([0.3, -0.5], rand_spd(rng, dim=2, ev_lo=0.3, ev_hi=1.5))
        b = Gaussian2([1.1, 0.4], rand_spd(rng, dim=2, ev_lo=0.3, ev_hi=1.5))
        lo, hi, n = -10.0, 11.0, 1400
        xs = np.linspace(lo, hi, n)
        ys = np.linspace(lo, hi, n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

        def density(g, p):
            d = p - g.mean
            inv = np.linalg.inv(g.cov)
            quad = np.einsum("ni,ij,nj->n", d, inv, d)
            return np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(np.linalg.det(g.cov)))

        integrand = np.sqrt(density(a, pts) * density(b, pts))
        cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
        numeric = integrand.sum() * cell
        assert abs(bhattacharyya_2d(a, b) - numeric) <= 1e-3

    def test_range_and_strictness(self, rng):
        for _ in range(30):
            a = Gaussian2(rng.normal(size=2), rand_spd(rng, dim=2))
            b = Gaussian2(rng.normal(size=2), rand_spd(rng, dim=2))
            beta = bhattacharyya_2d(a, b)
            assert 0.0 < beta <= 1.0
            if not np.allclose(a.mean, b.mean):
                assert beta < 1.0
            assert abs(beta - bhattacharyya_2d(b, a)) <= 1e-12


class TestGaussianDensity:
    def test_closed_form_at_mean(self):
        g = Gaussian3(np.zeros(3), np.eye(3))
        assert abs(gaussian_density(np.zeros(3), g) - (2 * np.pi) ** -1.5) <= 1e-12

    def test_integrates_to_one(self, rng):
        g = Gaussian3([0.2, -0.1, 0.5], rand_spd(rng, ev_lo=0.2, ev_hi=0.8))
        sig = np.sqrt(np.linalg.eigvalsh(g.cov)[-1])
        n = 81
        axes = [np.linspace(c - 6 * sig, c + 6 * sig, n) for c in g.mean]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        d = pts - g.mean
        inv = np.linalg.inv(g.cov)
        quad = np.einsum("ni,ij,nj->n", d, inv, d)
        dens = np.exp(-0.5 * quad) / np.sqrt((2 * np.pi) ** 3 * np.linalg.det(g.cov))
        cell = np.prod([ax[1] - ax[0] for ax in axes])
        assert abs(dens.sum() * cell - 1.0) <= 0.01

    def test_monotone_decay_along_rays(self, rng):
        g = rand_gaussian3(rng)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        ts = np.linspace(0, 3, 20)
        vals = [gaussian_density(g.mean + t * v, g) for t in ts]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_w2_metric_axioms_property(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_gaussian3(rng), rand_gaussian3(rng)
    dab = w2_squared(a, b)
    assert dab >= 0.0
    assert abs(dab - w2_squared(b, a)) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_psd_outputs_property(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_gaussian3(rng), rand_gaussian3(rng)
    lam = float(rng.uniform(0, 1))
    _, cov = geodesic_interpolate(a, b, lam)
    assert np.linalg.eigvalsh(cov)[0] >= -1e-9
    res = barycenter_n([a, b], weights=[0.3, 0.7])
    assert np.linalg.eigvalsh(res.cov)[0] >= -1e-9
