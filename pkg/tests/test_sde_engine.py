import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ttsa.core.problem_model import LearningRateSchedule, SchedulePair
from ttsa.core.problems import QuadraticBilevel
from ttsa.core.sde_engine import (
    NoiseModel,
    TTSAConfig,
    em_step,
    integrate,
    integrate_batch,
    make_stream,
    observation_increment,
)
from ttsa.errors import AssumptionViolation, ConfigurationError


def _config(schedules, **changes):
    settings = dict(dt=0.01, T=1.0, schedules=schedules, x0=[1.0], y0=[1.0], seed=3)
    settings.update(changes)
    return TTSAConfig(**settings)


def test_em_step_example(quad1d, zero_noise, schedules):
    x, y = em_step(([1.0], [1.0]), 0.0, 0.01, quad1d, zero_noise, schedules, make_stream(0))
    assert_allclose(x, [0.98], rtol=1e-14)
    assert_allclose(y, [1.0], rtol=1e-14)


def test_optimum_is_a_fixed_point_without_noise(quad1d, zero_noise, schedules):
    traj = integrate(_config(schedules, x0=[0.0], y0=[0.0]), quad1d, zero_noise)
    assert_array_equal(traj.xs, np.zeros_like(traj.xs))
    assert_array_equal(traj.ys, np.zeros_like(traj.ys))


def test_integrate_is_deterministic(quad1d, unit_noise, short_config):
    a = integrate(short_config, quad1d, unit_noise)
    b = integrate(short_config, quad1d, unit_noise)
    assert_array_equal(a.xs, b.xs)
    assert_array_equal(a.ys, b.ys)
    c = integrate(short_config.with_overrides(seed=4), quad1d, unit_noise)
    assert not np.array_equal(a.xs, c.xs)


def test_zero_noise_increment_is_drift(quad1d, zero_noise):
    rng = make_stream(9)
    dh1, dh2 = observation_increment(quad1d, zero_noise, ([1.0], [0.0]), 0.0, 0.1, rng)
    assert_allclose(dh1, [-0.1])
    assert_allclose(dh2, [0.1])

    # one joint block of d1 + d2 draws was consumed
    reference = make_stream(9)
    reference.standard_normal(2)
    assert rng.standard_normal() == reference.standard_normal()


def test_bias_decays_with_time(quad1d):
    noise = NoiseModel(
        bias_amp=([0.5], [0.0]),
        bias_rho=1.0,
        diff_const=(np.zeros((1, 1)), np.zeros((1, 1))),
        cross_corr=np.zeros((1, 1)),
    )
    dh1, _ = observation_increment(quad1d, noise, ([0.0], [0.0]), 0.0, 0.1, make_stream(0))
    assert_allclose(dh1, [0.05])
    dh1, _ = observation_increment(quad1d, noise, ([0.0], [0.0]), 3.0, 0.1, make_stream(0))
    assert_allclose(dh1, [0.0125])


def test_noise_model_limits_and_transients():
    noise = NoiseModel.isotropic(1, 1, sigma1=2.0, sigma2=3.0, cross=0.5)
    g11, g22, g12 = noise.limits()
    assert_allclose(g11, [[4.0]])
    assert_allclose(g22, [[9.0]])
    assert_allclose(g12, [[3.0]])

    transient = NoiseModel(
        bias_amp=([0.0], [0.0]),
        bias_rho=0.0,
        diff_const=([[1.0]], [[1.0]]),
        cross_corr=[[0.0]],
        diff_transient=([[2.0]], [[0.0]]),
        kappa=1.0,
    )
    s1, s2 = transient.sigma(1.0)
    assert_allclose(s1, [[2.0]])
    assert_allclose(s2, [[1.0]])
    assert_allclose(transient.limits()[0], [[1.0]])


@pytest.mark.parametrize("cross", [1.5, [[0.8], [0.8]]])
def test_noise_model_rejects_invalid_correlation(cross):
    d1 = 1 if np.isscalar(cross) else 2
    with pytest.raises(ConfigurationError, match="cross_corr"):
        NoiseModel(
            bias_amp=(np.zeros(d1), np.zeros(1)),
            bias_rho=0.0,
            diff_const=(np.eye(d1), np.eye(1)),
            cross_corr=np.atleast_2d(cross).reshape(d1, 1),
        )


def _one_step_increments(quad1d, noise, n):
    schedules = SchedulePair(LearningRateSchedule(1.0, 1.0, 0.9), LearningRateSchedule(1.0, 1.0, 0.6))
    cfg = TTSAConfig(dt=0.01, T=0.01, schedules=schedules, x0=[0.0], y0=[0.0], seed=17)
    outcome = integrate_batch(cfg, quad1d, noise, range(n))
    # gamma1(0) = gamma2(0) = 1 and the drift vanishes at the origin
    return outcome.final_x[:, 0] / np.sqrt(cfg.dt), outcome.final_y[:, 0] / np.sqrt(cfg.dt)


def test_diffusion_variance_and_correlation(quad1d):
    xi1, xi2 = _one_step_increments(quad1d, NoiseModel.isotropic(1, 1, cross=0.5), 20000)
    assert np.var(xi1) == pytest.approx(1.0, abs=0.05)
    assert np.var(xi2) == pytest.approx(1.0, abs=0.05)
    assert np.corrcoef(xi1, xi2)[0, 1] == pytest.approx(0.5, abs=0.03)


def test_fully_correlated_noise(quad1d):
    xi1, xi2 = _one_step_increments(quad1d, NoiseModel.isotropic(1, 1, cross=1.0), 2000)
    assert np.corrcoef(xi1, xi2)[0, 1] > 1.0 - 1e-6


def test_trajectory_contracts_without_noise(quad1d, zero_noise, schedules):
    traj = integrate(_config(schedules, dt=0.05, T=200.0, log_stride=100), quad1d, zero_noise)
    distance = np.abs(traj.xs[:, 0]) + np.abs(traj.ys[:, 0])
    assert distance[-1] < 0.05 * distance[0]
    assert distance[-1] < distance[len(distance) // 2]
    assert not traj.terminated_early
    assert traj.final_time == pytest.approx(200.0)


def test_logging_grid(quad1d, unit_noise, schedules):
    traj = integrate(_config(schedules, log_stride=10), quad1d, unit_noise)
    assert len(traj) == 11
    assert_allclose(traj.times, np.linspace(0.0, 1.0, 11))
    assert_allclose(traj.gamma1, (1.0 + traj.times) ** -0.9)
    assert_allclose(traj.gamma2, (1.0 + traj.times) ** -0.6)
    assert_array_equal(traj.xs[-1], traj.final_x)

    single = integrate(_config(schedules, T=0.01), quad1d, unit_noise)
    assert len(single) == 2


def test_blowup_guard_stops_the_run(quad1d, unit_noise, schedules):
    traj = integrate(_config(schedules, blowup_bound=1e-9), quad1d, unit_noise)
    assert traj.terminated_early
    assert "exceeds blowup_bound" in traj.reason
    assert len(traj) == 1
    assert traj.final_time == 0.0


def test_slow_bias_is_rejected_before_running(quad1d, schedules):
    noise = NoiseModel(
        bias_amp=([0.1], [0.0]),
        bias_rho=0.3,
        diff_const=(np.eye(1), np.eye(1)),
        cross_corr=np.zeros((1, 1)),
    )
    with pytest.raises(AssumptionViolation, match=r"Assumption 6 \(bias decay\)"):
        integrate(_config(schedules), quad1d, noise)


def test_settings_are_validated(quad1d, unit_noise, schedules):
    with pytest.raises(ConfigurationError, match="exceeds the horizon"):
        integrate(_config(schedules, dt=2.0), quad1d, unit_noise)
    with pytest.raises(ConfigurationError, match="do not match"):
        integrate(_config(schedules), quad1d, NoiseModel.isotropic(2, 1))
    with pytest.raises(ConfigurationError, match="initial state"):
        integrate(_config(schedules, x0=[1.0, 2.0]), quad1d, unit_noise)
    bad = SchedulePair(LearningRateSchedule(1.0, 1.0, 0.6), LearningRateSchedule(1.0, 1.0, 0.9))
    with pytest.raises(AssumptionViolation, match=r"Assumption 1 \(learning-rate schedule\)"):
        integrate(_config(bad), quad1d, unit_noise)


def test_euler_scheme_is_first_order(quad1d, zero_noise, schedules):
    def final_x(dt):
        return integrate(_config(schedules, dt=dt, T=2.0), quad1d, zero_noise).final_x[0]

    reference = final_x(0.001)
    ratio = abs(final_x(0.1) - reference) / abs(final_x(0.05) - reference)
    assert 1.6 < ratio < 2.4


def test_outer_gradient_modes_have_different_fixed_points(zero_noise):
    one = np.ones((1, 1))
    prob = QuadraticBilevel(
        P_f=one, R_f=one, P_g=one, C=one, a=np.ones(1), b=np.zeros(1), c0=np.zeros(1)
    ).to_problem()
    schedules = SchedulePair(LearningRateSchedule(1.0, 1.0, 0.6), LearningRateSchedule(1.0, 1.0, 0.55))
    cfg = TTSAConfig(dt=0.05, T=100.0, schedules=schedules, x0=[0.0], y0=[0.0], log_stride=2000)

    corrected = integrate(cfg, prob, zero_noise)
    partial = integrate(cfg.with_overrides(outer_gradient="partial"), prob, zero_noise)
    assert_allclose(corrected.final_x, prob.known_optimum[0], atol=1e-3)
    assert_allclose(corrected.final_x, [0.5], atol=1e-3)
    assert_allclose(partial.final_x, [1.0], atol=1e-3)


def test_batch_replicates_are_independent_of_grouping(maml, schedules):
    noise = NoiseModel.isotropic(maml.d1, maml.d2, cross=0.3)
    cfg = TTSAConfig(dt=0.01, T=0.5, schedules=schedules, x0=np.ones(maml.d1), y0=np.zeros(maml.d2), seed=21)
    together = integrate_batch(cfg, maml, noise, [0, 1, 2])
    alone = integrate_batch(cfg, maml, noise, [1])
    assert_allclose(together.final_x[1], alone.final_x[0], rtol=1e-12, atol=1e-14)
    assert_allclose(together.final_y[1], alone.final_y[0], rtol=1e-12, atol=1e-14)
    assert not np.allclose(together.final_x[0], together.final_x[1])


def test_chunked_noise_matches_single_steps(quad1d, unit_noise, schedules):
    cfg = _config(schedules, T=11.0)
    traj = integrate(cfg, quad1d, unit_noise)

    rng = make_stream(cfg.seed, 0)
    state = (cfg.x0, cfg.y0)
    for step in range(cfg.n_steps):
        state = em_step(state, step * cfg.dt, cfg.dt, quad1d, unit_noise, schedules, rng)
    assert_allclose(traj.final_x, state[0], rtol=1e-10, atol=1e-12)
    assert_allclose(traj.final_y, state[1], rtol=1e-10, atol=1e-12)


def test_streams_are_keyed_by_seed_and_index():
    assert make_stream(1, 0).standard_normal() == make_stream(1, 0).standard_normal()
    assert make_stream(1, 0).standard_normal() != make_stream(1, 1).standard_normal()
    assert make_stream(1, 0).standard_normal() != make_stream(2, 0).standard_normal()
