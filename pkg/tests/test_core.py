import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from rectiflow.core import (
    DimensionError,
    EnsembleStats,
    GaussianDist,
    NonFiniteStateError,
    PathBundle,
    TimeGrid,
    as_states,
    check_finite,
    clip_time,
    gaussian_sample,
    gaussian_score,
    standard_normal_block,
)


def fd_score(dist, x, h=1e-5):
    """Central finite difference of the log-density, coordinate by coordinate."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (dist.log_density(x + e) - dist.log_density(x - e)) / (2 * h)
    return out


class TestTimeGrid:
    def test_points(self):
        g = TimeGrid(4, 0.2, 1.0)
        np.testing.assert_allclose(g.times, [0.2, 0.4, 0.6, 0.8, 1.0])
        assert np.all(np.diff(g.times) > 0)

    def test_endpoints_exact(self):
        g = TimeGrid(100, 1e-3, 1 - 1e-3)
        assert g.times[0] == 1e-3 and g.times[-1] == 1 - 1e-3

    @pytest.mark.parametrize("kw", [dict(steps=0), dict(steps=2.5), dict(steps=3, t_start=1.0),
                                    dict(steps=3, t_start=0.5, t_end=0.5), dict(steps=3, t_end=1.2),
                                    dict(steps=3, delta=0.0), dict(steps=3, delta=0.5)])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            TimeGrid(**kw)

    def test_reflected(self):
        g = TimeGrid(10, 0.0, 0.99).reflected(1.0)
        assert g.t_start == pytest.approx(0.01) and g.t_end == 1.0 and g.steps == 10

    def test_clip(self):
        assert clip_time(1.0, 1e-3) == pytest.approx(1 - 1e-3)
        assert clip_time(-0.5) == 0.0
        assert TimeGrid(3, delta=0.1).clip(0.95) == pytest.approx(0.9)


class TestGaussianDist:
    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianDist(np.zeros(2), np.array([1.0, 0.0]))
        with pytest.raises(NonFiniteStateError):
            GaussianDist(np.array([np.nan]), np.ones(1))
        with pytest.raises(DimensionError):
            GaussianDist(np.zeros(2), np.ones(3))

    def test_immutable(self):
        d = GaussianDist.isotropic(1.0, 2.0, 3)
        with pytest.raises(ValueError):
            d.mean[0] = 5.0
        assert d.dim == 3

    @pytest.mark.parametrize("mean,var,x,expected", [(0.0, 1.0, 0.0, 0.0), (10.0, 1.0, 12.0, -2.0), (5.0, 0.5, 5.5, -1.0)])
    def test_score_examples(self, mean, var, x, expected):
        d = GaussianDist.isotropic(mean, var, 1)
        s = gaussian_score(d, [x])
        assert s[0] == pytest.approx(expected, abs=1e-15)
        np.testing.assert_allclose(fd_score(d, [x]), s, rtol=1e-6, atol=1e-9)

    def test_score_matches_finite_difference_on_random_points(self):
        rng = np.random.default_rng(3)
        d = GaussianDist(rng.normal(size=3), rng.uniform(0.2, 3.0, size=3))
        for x in rng.normal(size=(100, 3)) * 2:
            s = gaussian_score(d, x)
            fd = fd_score(d, x)
            assert np.max(np.abs(fd - s) / np.maximum(np.abs(s), 1e-3)) <= 1e-6

    def test_score_dimension_check(self):
        with pytest.raises(DimensionError):
            gaussian_score(GaussianDist.isotropic(0, 1, 2), np.zeros(3))

    def test_log_density_normalized(self):
        d = GaussianDist.isotropic(1.0, 0.7, 1)
        xs = np.linspace(-8, 10, 20001)
        dens = np.exp([d.log_density([x]) for x in xs])
        assert trapezoid(dens, xs) == pytest.approx(1.0, abs=1e-8)


class TestSampling:
    def test_standard_normal_moments(self):
        x = gaussian_sample(GaussianDist.isotropic(0, 1, 1), 0, 100_000)
        assert abs(x.mean()) < 0.02 and abs(x.var() - 1) < 0.02

    def test_shifted_mean(self):
        x = gaussian_sample(GaussianDist.isotropic(10, 1, 1), 1, 100_000)
        assert 9.98 <= x.mean() <= 10.02

    def test_deterministic(self):
        d = GaussianDist.isotropic(10, 1, 1)
        np.testing.assert_array_equal(gaussian_sample(d, 5, 10), gaussian_sample(d, 5, 10))
        assert not np.array_equal(gaussian_sample(d, 5, 10), gaussian_sample(d, 6, 10))

    def test_count_validation(self):
        with pytest.raises(ValueError):
            gaussian_sample(GaussianDist.isotropic(0, 1, 1), 0, 0)

    def test_prefix_stable(self):
        # particle k gets the same draw regardless of how many are requested
        d = GaussianDist.isotropic(0, 1, 2)
        np.testing.assert_array_equal(gaussian_sample(d, 2, 5000)[:7], gaussian_sample(d, 2, 7))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 9000), min_size=1, max_size=40, unique=True), st.integers(0, 2**31))
    def test_block_draws_independent_of_partition(self, ids, seed):
        ids = np.array(ids)
        full = standard_normal_block(seed, 2, 7, np.arange(9001), 2)
        np.testing.assert_array_equal(standard_normal_block(seed, 2, 7, ids, 2), full[ids])

    def test_streams_and_steps_differ(self):
        a = standard_normal_block(0, 2, 0, np.arange(4), 1)
        assert not np.array_equal(a, standard_normal_block(0, 3, 0, np.arange(4), 1))
        assert not np.array_equal(a, standard_normal_block(0, 2, 1, np.arange(4), 1))


class TestStatesAndStats:
    def test_as_states(self):
        assert as_states(3.0).shape == (1,)
        with pytest.raises(DimensionError):
            as_states(np.zeros((2, 2, 2)))
        with pytest.raises(DimensionError):
            as_states(np.zeros((4, 2)), d=3)
        with pytest.raises(NonFiniteStateError):
            as_states([1.0, np.inf])

    def test_check_finite_reports_step(self):
        with pytest.raises(NonFiniteStateError) as err:
            check_finite(np.array([np.nan]), step=12)
        assert err.value.step == 12 and "12" in str(err.value)

    def test_ensemble_stats_two_pass(self):
        rng = np.random.default_rng(0)
        x = 1e8 + rng.normal(size=(1000, 2))  # large offset: naive one-pass loses digits
        s = EnsembleStats.from_states(x)
        np.testing.assert_allclose(s.cov_diag, x.var(axis=0, ddof=1), rtol=1e-9)
        np.testing.assert_allclose(s.mean_stderr(), np.sqrt(s.cov_diag / 1000))
        assert np.all(s.cov_diag >= 0)

    def test_ensemble_errors(self):
        s = EnsembleStats.from_states([[1.0, 2.0]], reference=[[0.0, 0.0]])
        np.testing.assert_allclose(s.per_particle_errors, [[3.0, np.sqrt(5.0)]])
        assert s.cov_diag.tolist() == [0.0, 0.0]

    def test_path_bundle(self):
        times = np.linspace(0, 1, 3)
        paths = np.arange(12.0).reshape(3, 2, 2)
        b = PathBundle(times, paths[-1], seed=4, paths=paths)
        trs = list(b.trajectories())
        assert len(b) == 2 and [t.particle_id for t in trs] == [0, 1]
        np.testing.assert_array_equal(trs[1].states, paths[:, 1, :])
        np.testing.assert_array_equal(b.at(1), paths[1])
        with pytest.raises(ValueError):
            list(PathBundle(times, paths[-1], seed=4).trajectories())
