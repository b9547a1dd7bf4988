from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ttsa.core.clt_predictor import (
    LinearizationMatrices,
    NoiseLimits,
    assemble_Qx,
    frozen_rate_cross_block,
    hurwitz_margin,
    linearize,
    lyapunov_quadrature_oracle,
    lyapunov_residual,
    lyapunov_solve,
    matrix_exp,
    predict,
    quadrature_settings,
)
from ttsa.core.problem_model import SecondDerivatives
from ttsa.core.problems import random_spd
from ttsa.core.sde_engine import NoiseModel
from ttsa.errors import AccuracyError, ArgumentError, ConfigurationError, NumericalError, StabilityError


def _scalar_lin():
    a11, a12, a21, a22, h = (np.array([[v]]) for v in (-1.0, -1.0, 1.0, -1.0, -2.0))
    return LinearizationMatrices(A11=a11, A12=a12, A21=a21, A22=a22, H=h)


def _random_hurwitz(dim, rng):
    skew = rng.standard_normal((dim, dim))
    return -random_spd(dim, rng, 0.5, 2.0) + 0.5 * (skew - skew.T)


def test_linearize_scalar_quadratic(quad1d):
    lin = linearize(quad1d, [0.0], [0.0])
    assert_allclose(lin.A11, [[-1.0]])
    assert_allclose(lin.A12, [[-1.0]])
    assert_allclose(lin.A21, [[1.0]])
    assert_allclose(lin.A22, [[-1.0]])
    assert_allclose(lin.H, [[-2.0]])
    assert lin.schur_residual() == 0.0


def test_linearize_finite_difference_fallback(maml):
    x_star, y_star = maml.known_optimum
    analytic = linearize(maml, x_star, y_star)
    numeric = linearize(replace(maml, second_derivatives=None), x_star, y_star)
    for name in ("A11", "A12", "A21", "A22", "H"):
        assert_allclose(getattr(numeric, name), getattr(analytic, name), atol=1e-6)


def test_linearize_rejects_non_stationary_point(quad1d):
    with pytest.raises(ArgumentError, match="not stationary"):
        linearize(quad1d, [1.0], [0.0])


def test_hurwitz_margin():
    assert hurwitz_margin([[-1.0, 5.0], [0.0, -2.0]]) == pytest.approx(-1.0)
    assert hurwitz_margin([[0.0, -1.0], [1.0, 0.0]]) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ArgumentError):
        hurwitz_margin(np.ones((2, 3)))


@pytest.mark.parametrize("cross, expected", [(0.0, 2.0), (0.5, 1.0), (1.0, 0.0)])
def test_assemble_qx_scalar(cross, expected):
    limits = NoiseLimits(G11=np.eye(1), G22=np.eye(1), G12=np.array([[cross]]))
    assert_allclose(assemble_Qx(_scalar_lin(), limits), [[expected]], atol=1e-15)


def test_assemble_qx_is_symmetric(maml):
    lin = linearize(maml, *maml.known_optimum)
    noise = NoiseModel.isotropic(maml.d1, maml.d2, sigma1=0.7, sigma2=1.3, cross=0.4)
    qx = assemble_Qx(lin, NoiseLimits.from_noise(noise))
    assert_array_equal(qx, qx.T)
    assert np.linalg.eigvalsh(qx)[0] >= -1e-12


@pytest.mark.parametrize("gamma1, gamma2", [(1.0, 1.0), (0.01, 1.0), (10001.0 ** -0.9, 10001.0 ** -0.6)])
def test_frozen_rate_cross_block_scalar(gamma1, gamma2):
    limits = NoiseLimits(G11=np.eye(1), G22=np.eye(1), G12=np.array([[0.5]]))
    block = frozen_rate_cross_block(_scalar_lin(), limits, gamma1, gamma2)
    expected = 0.5 * np.sqrt(gamma1 * gamma2) / (2.0 * (gamma1 + gamma2))
    assert block.shape == (1, 1)
    assert_allclose(block, [[expected]], rtol=1e-9)


def test_frozen_rate_cross_block_vanishes_without_correlation():
    limits = NoiseLimits(G11=np.eye(1), G22=np.eye(1), G12=np.zeros((1, 1)))
    assert_allclose(frozen_rate_cross_block(_scalar_lin(), limits, 0.01, 1.0), [[0.0]], atol=1e-14)
    with pytest.raises(ArgumentError):
        frozen_rate_cross_block(_scalar_lin(), limits, 0.0, 1.0)


def test_noise_limits_reject_indefinite_joint_covariance():
    with pytest.raises(ArgumentError, match="semi-definite"):
        NoiseLimits(G11=np.eye(1), G22=np.eye(1), G12=np.array([[2.0]]))


def test_lyapunov_solve_examples():
    assert_allclose(lyapunov_solve(-np.eye(2), 2.0 * np.eye(2)), np.eye(2), atol=1e-15)
    assert_allclose(lyapunov_solve([[-2.0]], [[2.0]]), [[0.5]])
    assert_array_equal(lyapunov_solve(-np.eye(3), np.zeros((3, 3))), np.zeros((3, 3)))


def test_lyapunov_solve_non_normal():
    a = np.array([[-1.0, 2.0], [0.0, -3.0]])
    q = np.array([[1.0, 0.2], [0.2, 2.0]])
    sigma = lyapunov_solve(a, q)
    assert_array_equal(sigma, sigma.T)
    assert lyapunov_residual(a, sigma, q) <= 1e-12
    assert np.linalg.eigvalsh(sigma)[0] > 0


def test_lyapunov_solve_requires_hurwitz():
    with pytest.raises(StabilityError, match="not Hurwitz"):
        lyapunov_solve([[0.5]], [[1.0]])
    with pytest.raises(ArgumentError):
        lyapunov_solve(-np.eye(2), np.eye(3))


def test_quadrature_oracle_scalar():
    t_max, n_nodes = quadrature_settings([[-1.0]])
    assert t_max == pytest.approx(30.0)
    assert n_nodes % 10 == 0
    assert_allclose(lyapunov_quadrature_oracle([[-1.0]], [[2.0]], t_max, n_nodes), [[1.0]], rtol=1e-10)


def test_quadrature_oracle_rejects_short_horizon():
    with pytest.raises(AccuracyError):
        lyapunov_quadrature_oracle(-np.eye(2), np.eye(2), t_max=1.0, n_nodes=100)
    with pytest.raises(ArgumentError):
        lyapunov_quadrature_oracle(-np.eye(2), np.eye(2), t_max=0.0, n_nodes=100)


def test_lyapunov_solver_agrees_with_quadrature():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        dim = int(rng.integers(1, 9))
        a = _random_hurwitz(dim, rng)
        q = random_spd(dim, rng, 0.1, 3.0)
        sigma = lyapunov_solve(a, q)
        assert lyapunov_residual(a, sigma, q) <= 1e-10
        reference = lyapunov_quadrature_oracle(a, q, *quadrature_settings(a))
        assert np.linalg.norm(sigma - reference) <= 1e-8 * np.linalg.norm(reference)


def test_matrix_exp_examples():
    assert_allclose(matrix_exp(np.zeros((2, 2))), np.eye(2), atol=1e-15)
    assert_allclose(matrix_exp(np.diag([1.0, 2.0])), np.diag([np.e, np.e ** 2]), rtol=1e-14)
    assert_allclose(matrix_exp([[0.0, 1.0], [0.0, 0.0]]), [[1.0, 1.0], [0.0, 1.0]], atol=1e-15)
    assert_allclose(matrix_exp([[0.0, -np.pi], [np.pi, 0.0]]), -np.eye(2), atol=1e-12)


def test_matrix_exp_overflow():
    with pytest.raises(NumericalError, match="overflows"):
        matrix_exp([[1000.0]])


def test_predict_scalar_quadratic(quad1d, unit_noise):
    prediction = predict(quad1d, unit_noise, [0.0], [0.0], cross_check=True)
    assert_allclose(prediction.Sigma_x, [[0.5]], rtol=1e-12)
    assert_allclose(prediction.Sigma_y, [[0.5]], rtol=1e-12)
    assert_allclose(prediction.Qx, [[2.0]])
    assert prediction.hurwitz_margins == {"H": pytest.approx(-2.0), "A22": pytest.approx(-1.0)}
    assert prediction.quadrature_agreement["Sigma_x"] <= 1e-8
    assert max(prediction.lyapunov_residuals) <= 1e-10

    data = prediction.as_dict()
    assert data["Sigma_x"] == [[prediction.Sigma_x[0, 0]]]
    assert data["noise_limits"]["G21"] == [[0.0]]


def test_predict_correlated_and_silent_noise(quad1d):
    correlated = predict(quad1d, NoiseModel.isotropic(1, 1, cross=0.5), [0.0], [0.0])
    assert_allclose(correlated.Sigma_x, [[0.25]], rtol=1e-12)
    assert_allclose(correlated.Sigma_y, [[0.5]], rtol=1e-12)
    assert correlated.quadrature_agreement is None

    silent = predict(quad1d, NoiseModel.zero(1, 1), [0.0], [0.0])
    assert_array_equal(silent.Sigma_x, [[0.0]])
    assert_array_equal(silent.Sigma_y, [[0.0]])


def test_predict_scales_with_noise_amplitude(maml):
    x_star, y_star = maml.known_optimum
    base = predict(maml, NoiseModel.isotropic(maml.d1, maml.d2, cross=0.2), x_star, y_star)
    scaled = predict(maml, NoiseModel.isotropic(maml.d1, maml.d2, 3.0, 3.0, cross=0.2), x_star, y_star)
    assert_allclose(scaled.Sigma_x, 9.0 * base.Sigma_x, rtol=1e-9, atol=1e-14)
    assert_allclose(scaled.Sigma_y, 9.0 * base.Sigma_y, rtol=1e-9, atol=1e-14)
    assert np.linalg.eigvalsh(base.Sigma_x)[0] > 0


def test_predict_failures_name_their_stage(quad1d, unit_noise):
    with pytest.raises(ArgumentError) as info:
        predict(quad1d, unit_noise, [1.0], [0.0])
    assert str(info.value).startswith("linearize:")

    unstable = replace(
        quad1d, second_derivatives=SecondDerivatives(jac_x_hypergrad=lambda x, y: np.array([[-5.0]]))
    )
    with pytest.raises(StabilityError) as info:
        predict(unstable, unit_noise, [0.0], [0.0])
    assert str(info.value).startswith("hurwitz:")

    with pytest.raises(ConfigurationError, match="noise limits"):
        predict(quad1d, NoiseModel.isotropic(2, 1), [0.0], [0.0])
