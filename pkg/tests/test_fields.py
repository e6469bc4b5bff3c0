import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rectiflow.core import GaussianDist, gaussian_sample, gaussian_score
from rectiflow.fields import (
    InterpolationMarginal,
    OUMarginal,
    VectorField,
    analytic_marginal_field,
    conditional_lqr_field,
    constant_field,
    field_from_score,
    interpolation_score_field,
    marginal_at,
    reverse_field,
    score_field_from_field,
    score_from_field,
    tweedie_posterior_mean_y0,
)

N01 = InterpolationMarginal(GaussianDist.isotropic(0.0, 1.0, 1))
N10 = InterpolationMarginal(GaussianDist.isotropic(10.0, 1.0, 1))


def mc_pairs(m, t, n=2_000_000, seed=0):
    """Monte Carlo samples of (Y0, Y1, Yt) on the interpolation path."""
    rng = np.random.default_rng(seed)
    y0 = m.p0.mean + np.sqrt(m.p0.var_diag) * rng.standard_normal((n, m.dim))
    y1 = m.p1.mean + np.sqrt(m.p1.var_diag) * rng.standard_normal((n, m.dim))
    return y0, y1, t * y1 + (1 - t) * y0


class TestMarginal:
    def test_endpoints_exact(self):
        assert marginal_at(N10, 0.0) is N10.p0
        assert marginal_at(N01, 1.0) is N01.p1

    def test_midpoint(self):
        g = marginal_at(N10, 0.5)
        assert g.mean[0] == 5.0 and g.var_diag[0] == 0.5

    def test_midpoint_monte_carlo(self):
        _, _, yt = mc_pairs(N10, 0.5, n=100_000)
        assert abs(yt.mean() - 5.0) < 0.02 and abs(yt.var() - 0.5) < 0.02

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            marginal_at(N01, 1.5)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            InterpolationMarginal(GaussianDist.isotropic(0, 1, 2), GaussianDist.isotropic(0, 1, 3))


class TestAnalyticField:
    def test_closed_form_standard_p0(self):
        u = analytic_marginal_field(N01)
        for t in np.linspace(0.0, 0.95, 20):
            for y in (-2.0, 0.3, 1.7):
                expected = -(1 - 2 * t) * y / ((1 - t) ** 2 + t**2)
                assert u(np.array([y]), t)[0] == pytest.approx(expected, rel=1e-12, abs=1e-14)
        np.testing.assert_allclose(u(np.linspace(-3, 3, 7)[:, None], 0.5), 0.0, atol=1e-15)
        assert u(np.array([2.0]), 0.0)[0] == -2.0

    def test_zero_at_mode_symmetric(self):
        m = InterpolationMarginal(GaussianDist.isotropic(0.0, 2.5, 1))
        u = analytic_marginal_field(m)
        for t in (0.1, 0.4, 0.8):
            assert u(m.mean_at(t)[None, :], t)[0, 0] == pytest.approx(0.0, abs=1e-14)

    def test_conditional_expectation_monte_carlo(self):
        # u_t(y) = E[Y1 - Y0 | Y_t = y], estimated by local averaging
        t = 0.3
        y0, y1, yt = mc_pairs(N10, t)
        u = analytic_marginal_field(N10)
        for y in (6.0, 7.0, 8.0):
            sel = np.abs(yt[:, 0] - y) < 0.02
            est = (y1 - y0)[sel].mean()
            assert est == pytest.approx(u(np.array([y]), t)[0], abs=0.05)

    def test_requires_standard_p1(self):
        m = InterpolationMarginal(GaussianDist.isotropic(0, 1, 1), GaussianDist.isotropic(1, 1, 1))
        with pytest.raises(ValueError):
            analytic_marginal_field(m)

    def test_clips_at_one(self):
        u = analytic_marginal_field(N10, delta=1e-3)
        assert np.isfinite(u(np.array([0.5]), 1.0)).all()
        np.testing.assert_array_equal(u(np.array([0.5]), 1.0), u(np.array([0.5]), 1 - 1e-3))


class TestLQR:
    def test_examples(self):
        assert conditional_lqr_field(5.0)(np.array([2.0]), 0.4)[0] == pytest.approx(5.0)
        assert conditional_lqr_field(0.0)(np.array([1.0]), 0.0)[0] == -1.0
        np.testing.assert_array_equal(conditional_lqr_field([1.0, 2.0])(np.array([1.0, 2.0]), 0.7), [0.0, 0.0])

    def test_per_particle_targets(self):
        c = conditional_lqr_field(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(c(np.zeros((2, 1)), 0.5), [[2.0], [6.0]])


class TestScoreFieldConversions:
    def test_score_at_one(self):
        assert score_from_field(constant_field([123.0]), np.array([0.7]), 1.0)[0] == -0.7

    def test_standard_p0_midpoint(self):
        s = score_from_field(analytic_marginal_field(N01), np.array([1.0]), 0.5)
        assert s[0] == pytest.approx(-2.0, abs=1e-15)
        assert s[0] == pytest.approx(gaussian_score(marginal_at(N01, 0.5), [1.0])[0], abs=1e-15)

    def test_analytic_identity_on_grid(self):
        u = analytic_marginal_field(N01)
        for y in np.linspace(-3, 3, 13):
            for t in np.linspace(0.1, 0.9, 9):
                s = score_from_field(u, np.array([y]), t)
                assert abs(s[0] - gaussian_score(marginal_at(N01, t), [y])[0]) <= 1e-10

    def test_field_from_zero_score(self):
        assert field_from_score(constant_field([0.0]))(np.array([1.0]), 0.5)[0] == pytest.approx(-2.0)

    def test_field_from_gaussian_score_is_analytic(self):
        u = analytic_marginal_field(N10)
        v = field_from_score(interpolation_score_field(N10))
        xs = np.linspace(-2, 12, 15)[:, None]
        for t in np.linspace(0.0, 0.99, 12):
            np.testing.assert_allclose(v(xs, t), u(xs, t), rtol=0, atol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.01, 0.99), st.floats(-3, 3), st.floats(0.1, 2))
    def test_round_trip(self, y, t, a, b):
        s = VectorField(lambda x, tt: a * np.tanh(b * x) + tt, "test")
        back = score_from_field(field_from_score(s), np.array([y]), t)
        assert abs(back[0] - s(np.array([y]), t)[0]) <= 1e-10 * max(1.0, abs(y) / t)

    def test_singular_start_rejected(self):
        with pytest.raises(ValueError):
            score_from_field(constant_field([0.0]), np.array([1.0]), 0.0)

    def test_score_field_clips(self):
        sf = score_field_from_field(analytic_marginal_field(N01), delta=1e-3)
        np.testing.assert_array_equal(sf(np.array([1.0]), 0.0), sf(np.array([1.0]), 1e-3))


class TestTweedie:
    def test_identity_at_zero(self):
        assert tweedie_posterior_mean_y0(N10, np.array([3.3]), 0.0)[0] == pytest.approx(3.3)

    def test_standard_midpoint_matches_gaussian_conditioning(self):
        # bivariate Gaussian: E[Y0 | Yt=y] = Cov(Y0, Yt) / Var(Yt) * y = 0.5 / 0.5 * y
        got = tweedie_posterior_mean_y0(N01, np.array([1.0]), 0.5)[0]
        assert got == pytest.approx(1.0, abs=1e-14)
        y0, _, yt = mc_pairs(N01, 0.5, seed=1)
        sel = np.abs(yt[:, 0] - 1.0) < 0.01
        assert y0[sel].mean() == pytest.approx(got, abs=0.03)

    def test_collapses_to_prior_mean(self):
        for y in (-3.0, 0.0, 4.0):
            assert tweedie_posterior_mean_y0(N10, np.array([y]), 1 - 1e-4, delta=1e-4)[0] == pytest.approx(10.0, abs=2e-3)

    def test_general_formula(self):
        m = InterpolationMarginal(GaussianDist(np.array([2.0, -1.0]), np.array([0.5, 3.0])))
        y, t = np.array([0.4, 1.2]), 0.35
        mt, vt = m.mean_at(t), m.var_at(t)
        expected = m.p0.mean + (1 - t) * m.p0.var_diag / vt * (y - mt)
        np.testing.assert_allclose(tweedie_posterior_mean_y0(m, y, t), expected, rtol=1e-12)


class TestReverseAndOU:
    def test_reverse_field(self):
        u = analytic_marginal_field(N10)
        x = np.array([[1.0], [5.0]])
        np.testing.assert_array_equal(reverse_field(u)(x, 0.3), -u(x, 0.7))

    def test_ou_marginal_moments_monte_carlo(self):
        ou = OUMarginal(GaussianDist.isotropic(10.0, 1.0, 1), horizon=2.0)
        x0 = gaussian_sample(ou.p0, 0, 200_000)
        rng = np.random.default_rng(4)
        s = 2.0 * 0.5
        xs = np.exp(-s) * x0 + np.sqrt(1 - np.exp(-2 * s)) * rng.standard_normal(x0.shape)
        assert xs.mean() == pytest.approx(ou.mean_at(0.5)[0], abs=0.01)
        assert xs.var() == pytest.approx(ou.var_at(0.5)[0], rel=0.01)

    def test_ou_score(self):
        ou = OUMarginal(GaussianDist.isotropic(3.0, 0.5, 1), horizon=1.0)
        np.testing.assert_allclose(ou.score_field()(np.array([1.0]), 0.2),
                                   gaussian_score(GaussianDist(ou.mean_at(0.2), ou.var_at(0.2)), [1.0]))
