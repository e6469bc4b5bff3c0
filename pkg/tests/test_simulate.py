import numpy as np
import pytest

from rectiflow.control import GuidanceSchedule
from rectiflow.core import DimensionError, GaussianDist, NonFiniteStateError, TimeGrid, gaussian_sample
from rectiflow.fields import (
    InterpolationMarginal,
    OUMarginal,
    VectorField,
    analytic_marginal_field,
    constant_field,
    interpolation_score_field,
    reverse_field,
)
from rectiflow.simulate import (
    ProcessSpec,
    euler_maruyama_step,
    euler_step,
    forward_controlled_ode,
    forward_controlled_sde,
    forward_grid,
    noise_schedule,
    ou_forward_ode,
    ou_forward_sde,
    reverse_clock,
    reverse_controlled_ode,
    reverse_controlled_sde,
    reverse_ode_grid,
    reverse_of,
    reverse_sde_grid,
    rf_forward_sde,
    rf_reverse_sde,
    run_process,
)

M10 = InterpolationMarginal(GaussianDist.isotropic(10.0, 1.0, 1))
U10 = analytic_marginal_field(M10)


class TestSteps:
    def test_euler_example(self):
        assert euler_step(np.array([1.0]), np.array([2.0]), 0.01)[0] == pytest.approx(1.02)

    def test_identity_schedule_increments(self):
        ds = noise_schedule("identity").increments(TimeGrid(100).times)
        np.testing.assert_allclose(ds, 0.01, rtol=1e-12)

    def test_power_schedule(self):
        ds = noise_schedule("power:2").increments(np.array([0.0, 0.5, 1.0]))
        np.testing.assert_allclose(ds, [0.25, 0.75])
        for bad in ("power:0", "power:-1", "cosine"):
            with pytest.raises(ValueError):
                noise_schedule(bad)

    def test_em_without_noise_is_euler(self):
        x, f = np.array([[0.3], [-1.0]]), np.array([[2.0], [0.5]])
        z = np.random.default_rng(0).standard_normal(x.shape)
        np.testing.assert_array_equal(euler_maruyama_step(x, f, 0.0, 0.01, z), euler_step(x, f, 0.01))

    def test_em_rejects_bad_args(self):
        with pytest.raises(ValueError):
            euler_maruyama_step(np.zeros(1), np.zeros(1), -1.0, 0.1, np.zeros(1))

    def test_non_finite_reports_step(self):
        spec = ProcessSpec("fwd_ctrl_ode", lambda x, t, _: np.where(t > 0.45, np.inf, 0.0) * np.ones_like(x),
                           TimeGrid(10))
        with pytest.raises(NonFiniteStateError) as err:
            run_process(spec, [[0.0]], 0)
        assert err.value.step == 5


class TestGrids:
    def test_bounds(self):
        assert forward_grid(10, 1e-3).times[-1] == 1 - 1e-3
        assert reverse_ode_grid(10, 1e-3).times[0] == 1e-3 and reverse_ode_grid(10, 1e-3).times[-1] == 1.0
        g = reverse_sde_grid(10, 1e-3)
        assert (g.times[0], g.times[-1]) == (1e-3, 1 - 1e-3)


class TestControlledODE:
    def test_full_forward_control_follows_chord(self):
        y0 = gaussian_sample(M10.p0, 0, 50)
        y1 = gaussian_sample(M10.p1, 0, 50, stream=1)
        b = run_process(forward_controlled_ode(U10, y1, 1.0, forward_grid(100)), y0, 0, keep_paths=True)
        chord = b.times[:, None, None] * y1[None] + (1 - b.times[:, None, None]) * y0[None]
        assert np.max(np.abs(b.paths - chord)) <= 1e-12 * max(1.0, np.abs(chord).max())

    def test_full_reverse_control_hits_target(self):
        n_steps = 50
        y0 = gaussian_sample(M10.p0, 1, 20)
        z = gaussian_sample(M10.p1, 2, 20)
        spec = reverse_controlled_ode(reverse_field(U10), y0, 1.0, reverse_ode_grid(n_steps))
        end = run_process(spec, z, 0).terminal
        assert np.max(np.abs(end - y0)) <= 2.0 / n_steps
        np.testing.assert_allclose(end, y0, atol=1e-12)

    def test_null_control_bit_identical(self):
        y1 = gaussian_sample(M10.p1, 3, 30)
        y0 = gaussian_sample(M10.p0, 3, 30)
        g = forward_grid(40)
        plain = ProcessSpec("fwd_ctrl_ode", lambda x, t, _: U10(x, t), g)
        a = run_process(forward_controlled_ode(U10, y1, 0.0, g), y0, 0, keep_paths=True)
        b = run_process(plain, y0, 0, keep_paths=True)
        np.testing.assert_array_equal(a.paths, b.paths)

    def test_windowed_schedule_respected(self):
        y1 = np.array([[100.0]])
        spec = forward_controlled_ode(constant_field([0.0]), y1, GuidanceSchedule.windowed(1.0, 0.5, 1.0),
                                      forward_grid(10))
        b = run_process(spec, [[0.0]], 0, keep_paths=True)
        assert np.all(b.paths[b.times <= 0.5 - 1e-9] == 0.0) and b.terminal[0, 0] > 0


class TestSDEDrivers:
    def test_null_control_forward_sde_bit_identical(self):
        y0 = gaussian_sample(M10.p0, 0, 200)
        g = forward_grid(50, 1e-2)
        a = run_process(forward_controlled_sde(np.zeros((1, 1)), 0.0, g), y0, 9, keep_paths=True)
        b = run_process(rf_forward_sde(g), y0, 9, keep_paths=True)
        np.testing.assert_array_equal(a.paths, b.paths)

    def test_null_control_reverse_sde_bit_identical(self):
        score = reverse_clock(interpolation_score_field(M10))
        z = gaussian_sample(M10.p1, 1, 200)
        g = reverse_sde_grid(50, 1e-2)
        a = run_process(reverse_controlled_sde(np.full((1, 1), 7.0), 0.0, score, g), z, 4, keep_paths=True)
        b = run_process(rf_reverse_sde(score, g), z, 4, keep_paths=True)
        np.testing.assert_array_equal(a.paths, b.paths)

    def test_full_control_forward_sde_is_deterministic_chord(self):
        y0, y1 = np.array([[1.0], [3.0]]), np.array([[-2.0], [0.5]])
        b = run_process(forward_controlled_sde(y1, 1.0, forward_grid(20, 1e-2)), y0, 0, keep_paths=True)
        chord = b.times[:, None, None] * y1[None] + (1 - b.times[:, None, None]) * y0[None]
        np.testing.assert_allclose(b.paths, chord, atol=1e-12)

    def test_ou_preserves_standard_normal(self):
        x0 = gaussian_sample(GaussianDist.isotropic(0.0, 1.0, 1), 0, 10_000)
        end = run_process(ou_forward_sde(TimeGrid(200)), x0, 0).terminal
        assert abs(end.var(ddof=1) - 1.0) <= 0.05

    def test_n_jobs_invariant(self):
        x0 = gaussian_sample(M10.p0, 0, 101)
        spec = rf_forward_sde(forward_grid(30, 1e-2))
        a = run_process(spec, x0, 5, keep_paths=True)
        b = run_process(spec, x0, 5, keep_paths=True, n_jobs=4)
        np.testing.assert_array_equal(a.paths, b.paths)

    def test_seed_changes_noise(self):
        x0 = np.zeros((5, 1))
        spec = ou_forward_sde(TimeGrid(10))
        assert not np.array_equal(run_process(spec, x0, 0).terminal, run_process(spec, x0, 1).terminal)


class TestReversal:
    def test_ode_involution(self):
        spec = forward_controlled_ode(U10, np.array([[2.0]]), 0.3, forward_grid(20))
        back = reverse_of(reverse_of(spec))
        x = np.array([[0.4], [9.0]])
        for t in (0.1, 0.5, 0.9):
            # 1 - (1 - t) rounds, so equality holds to round-off only
            np.testing.assert_allclose(back.drift_at(x, t), spec.drift_at(x, t), rtol=1e-13)
        np.testing.assert_allclose(back.grid.times, spec.grid.times, atol=1e-15)

    def test_ode_reverse_negates(self):
        spec = ou_forward_ode(OUMarginal(M10.p0).score_field(), TimeGrid(10))
        r = reverse_of(spec)
        x = np.array([[1.5]])
        np.testing.assert_array_equal(r.drift_at(x, 0.3), -spec.drift_at(x, 0.7))

    def test_rf_sde_reversal_matches_reverse_driver(self):
        score_fwd = interpolation_score_field(M10)
        g = forward_grid(20, 1e-2)
        generic = reverse_of(rf_forward_sde(g), score_fwd)
        direct = rf_reverse_sde(reverse_clock(score_fwd), reverse_sde_grid(20, 1e-2))
        x = np.linspace(-3, 12, 6)[:, None]
        for s in (0.1, 0.4, 0.75):
            np.testing.assert_allclose(generic.drift_at(x, s), direct.drift_at(x, s), rtol=1e-12, atol=1e-12)
            assert generic.diffusion(s) == pytest.approx(direct.diffusion(s), rel=1e-12)

    def test_ou_reversal_drift(self):
        score = VectorField(lambda x, t: -x / (1 + t), "s")
        r = reverse_of(ou_forward_sde(TimeGrid(10)), score)
        x = np.array([[0.5], [2.0]])
        np.testing.assert_allclose(r.drift_at(x, 0.25), x + 2 * score(x, 0.75))
        assert r.diffusion(0.25) == pytest.approx(np.sqrt(2))

    def test_sde_reversal_needs_score(self):
        with pytest.raises(ValueError, match="score"):
            reverse_of(ou_forward_sde(TimeGrid(10)))


class TestValidation:
    def test_drift_shape_mismatch(self):
        spec = ProcessSpec("fwd_ctrl_ode", lambda x, t, _: np.zeros((x.shape[0], 2)), TimeGrid(3))
        with pytest.raises(DimensionError):
            run_process(spec, np.zeros((4, 1)), 0)

    def test_target_mismatch(self):
        with pytest.raises(DimensionError):
            run_process(forward_controlled_ode(U10, np.zeros((3, 1)), 0.5, forward_grid(5)), np.zeros((4, 1)), 0)
        with pytest.raises(DimensionError):
            run_process(forward_controlled_ode(U10, np.zeros((1, 2)), 0.5, forward_grid(5)), np.zeros((4, 1)), 0)

    def test_unknown_kind_and_bad_seed(self):
        with pytest.raises(ValueError):
            ProcessSpec("teleport", lambda x, t, _: x, TimeGrid(2))
        with pytest.raises(ValueError):
            run_process(ou_forward_sde(TimeGrid(2)), [[0.0]], -1)
