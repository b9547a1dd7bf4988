from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ttsa.core.clt_predictor import linearize
from ttsa.core.hypergradient import hypergrad, phi, phi_grad_fd, solve_inner
from ttsa.core.problems import (
    MAMLQuadratic,
    available_problems,
    is_spd,
    make_langevin_toy,
    make_maml,
    make_problem,
    make_quadratic,
    random_spd,
)
from ttsa.errors import ConfigurationError


def test_quadratic1d_closed_forms(quad1d):
    assert phi(quad1d, [2.0]) == pytest.approx(4.0)
    assert_allclose(quad1d.inner_solution(np.array([2.0])), [2.0])
    assert quad1d.f(np.array([1.0]), np.array([1.0])) == pytest.approx(1.0)
    assert quad1d.g(np.array([1.0]), np.array([3.0])) == pytest.approx(2.0)
    assert quad1d.mu_g == pytest.approx(1.0)


def test_maml_single_task_example():
    prob = MAMLQuadratic(Cs=np.ones((1, 1, 1)), mus=np.ones((1, 1)), lam=1.0).to_problem()
    assert (prob.d1, prob.d2) == (1, 1)
    assert_allclose(prob.inner_solution(np.array([3.0])), [2.0])
    assert phi(prob, [3.0]) == pytest.approx(0.5)
    assert prob.f(np.array([3.0]), np.array([2.0])) == pytest.approx(0.5)
    x_star, y_star = prob.known_optimum
    assert_allclose(x_star, [1.0])
    assert_allclose(y_star, [1.0])


def test_maml_symmetric_tasks_meet_in_the_middle():
    c = np.array([[[1.5, 0.2], [0.2, 0.8]]] * 2)
    mus = np.array([[1.0, -0.5], [-1.0, 0.5]])
    prob = MAMLQuadratic(Cs=c, mus=mus, lam=0.7).to_problem()
    x_star, _ = prob.known_optimum
    assert_allclose(x_star, [0.0, 0.0], atol=1e-14)


@pytest.mark.parametrize("builder", [
    lambda: make_maml(4, 3, seed=2, lam=0.5),
    lambda: make_quadratic(3, 2, seed=4),
    lambda: make_langevin_toy(np.diag([1.0, 3.0]), [[0.5, -1.0]], [2.0]),
])
def test_phi_closed_form_matches_f_on_inner_solution(builder):
    prob = builder()
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal(prob.d1)
        assert prob.phi_closed_form(x) == pytest.approx(float(prob.f(x, prob.inner_solution(x))), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("builder", [
    lambda: make_maml(3, 2, seed=9, lam=1.3),
    lambda: make_quadratic(2, 4, seed=6),
])
def test_inner_solution_matches_descent(builder):
    prob = builder()
    iterative = replace(prob, inner_solution=None)
    x = np.random.default_rng(3).standard_normal(prob.d1)
    assert_allclose(solve_inner(iterative, x), prob.inner_solution(x), atol=1e-8)
    assert np.linalg.norm(prob.grad_y_g(x, prob.inner_solution(x))) <= 1e-10


@pytest.mark.parametrize("builder", [
    lambda: make_maml(3, 2, seed=9, lam=1.3),
    lambda: make_quadratic(2, 3, seed=12),
])
def test_hypergradient_matches_finite_differences(builder):
    prob = builder()
    rng = np.random.default_rng(20)
    for _ in range(20):
        x = rng.uniform(-2.0, 2.0, prob.d1)
        analytic = hypergrad(prob, x, solve_inner(prob, x)).value
        reference = phi_grad_fd(prob, x)
        assert np.linalg.norm(analytic - reference) <= 1e-6 * (1.0 + np.linalg.norm(reference))


def test_langevin_toy_is_decoupled():
    prob = make_langevin_toy(np.diag([1.0, 2.0]), [[1.0, 0.5], [0.0, -1.0]], [1.0, 2.0])
    x_star, y_star = prob.known_optimum
    assert_array_equal(x_star, [1.0, 2.0])
    assert_array_equal(y_star, [0.0, 0.0])
    lin = linearize(prob, x_star, y_star)
    assert_array_equal(lin.A21, np.zeros((2, 2)))
    assert_allclose(lin.H, -np.eye(2), atol=1e-14)
    assert_allclose(lin.A22, -np.diag([1.0, 2.0]))


def test_random_spd_eigenvalue_range():
    rng = np.random.default_rng(0)
    for dim in (1, 3, 6):
        a = random_spd(dim, rng, 0.5, 2.0)
        eigenvalues = np.linalg.eigvalsh(a)
        assert is_spd(a)
        assert eigenvalues[0] >= 0.5 - 1e-12
        assert eigenvalues[-1] <= 2.0 + 1e-12


def test_is_spd():
    assert is_spd(np.eye(2))
    assert not is_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    assert not is_spd(-np.eye(2))
    assert not is_spd(np.ones(3))


def test_make_quadratic_is_seeded():
    a = make_quadratic(2, 3, seed=5)
    b = make_quadratic(2, 3, seed=5)
    assert_array_equal(a.known_optimum[0], b.known_optimum[0])
    assert not np.array_equal(a.known_optimum[0], make_quadratic(2, 3, seed=6).known_optimum[0])


def test_quadratic_without_offsets_has_optimum_at_origin():
    x_star, y_star = make_quadratic(3, 2, seed=1, offsets=False).known_optimum
    assert_allclose(x_star, np.zeros(3), atol=1e-14)
    assert_allclose(y_star, np.zeros(2), atol=1e-14)


def test_oracles_broadcast_over_batches():
    prob = make_maml(2, 3, seed=0, lam=1.0)
    x = np.zeros((5, prob.d1))
    y = np.zeros((5, prob.d2))
    assert prob.f(x, y).shape == (5,)
    assert prob.grad_x_f(x, y).shape == (5, prob.d1)
    assert prob.grad_y_g(x, y).shape == (5, prob.d2)
    assert prob.hess_yy_g(x, y).shape == (5, prob.d2, prob.d2)
    assert prob.hess_xy_g(x, y).shape == (5, prob.d1, prob.d2)


def test_registry_builds_every_problem():
    assert available_problems() == ["langevin_toy", "maml", "quadratic", "quadratic1d"]
    for name in available_problems():
        prob = make_problem(name, {})
        assert prob.name == name


def test_registry_explicit_parameters():
    maml = make_problem("maml", {"C": [1.0, 2.0], "mu": [1.0, -1.0], "lam": 1.0})
    assert (maml.d1, maml.d2) == (1, 2)

    quad = make_problem("quadratic", {
        "P_f": [[2.0]], "R_f": [[1.0]], "P_g": [[1.0]], "C": [[1.0]], "a": [1.0],
    })
    x_star, y_star = quad.known_optimum
    # Phi(x) = (x - 1)^2 + x^2 / 2
    assert_allclose(x_star, [2.0 / 3.0])
    assert_allclose(y_star, [2.0 / 3.0])


def test_registry_broken_gradient_flag():
    prob = make_problem("quadratic1d", {"broken_gradient": True})
    assert prob.params["broken_gradient"] is True
    assert hypergrad(prob, [0.0], [0.0]).value[0] == pytest.approx(0.05)


@pytest.mark.parametrize("name, params, fragment", [
    ("rosenbrock", {}, "unknown problem"),
    ("maml", {"tasks": 2, "colour": "red"}, "colour"),
    ("maml", {"lam": 0.0}, "lam"),
    ("maml", {"tasks": 0}, "N >= 1"),
    ("quadratic", {"P_f": [[1.0]], "R_f": [[1.0]], "P_g": [[-1.0]], "C": [[1.0]]}, "P_g"),
    ("quadratic", {"P_f": [[1.0]], "R_f": [[1.0]], "P_g": [[1.0]], "C": [[1.0, 2.0]]}, "C"),
    ("langevin_toy", {"P": [[1.0, 0.0], [0.0, 1.0]], "M": [[1.0]], "m": [1.0]}, "M"),
])
def test_registry_rejects_bad_parameters(name, params, fragment):
    with pytest.raises(ConfigurationError, match=fragment):
        make_problem(name, params)
