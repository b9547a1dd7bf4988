"""
TTSA Bilevel Toolkit - Hypergradient Module
===========================================

Implements the corrected outer gradient

    hypergrad(x, y) = grad_x f - hess_xy g [hess_yy g]^(-1) grad_y f,

its curvature (the hyper-Hessian), the inner solve y*(x), and the
finite-difference oracles used to audit both.

Inner Hessian systems are always solved through a Cholesky factorization;
a failed or badly pivoted factorization is reported as a SingularityError
naming the smallest eigenvalue.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ttsa import config
from ttsa.core.problem_model import SecondDerivatives, central_jacobian, fd_step
from ttsa.errors import ArgumentError, NonConvergenceError, SingularityError

logger = logging.getLogger("Grad")

_PIVOT_RATIO_MIN = 1e-14


@dataclass(frozen=True)
class HypergradResult:
    """
    Attributes:
        value (np.ndarray): Hypergradient, shape (d1,)
        linear_solve_residual (float): ||H_yy v - grad_y f|| of the inner solve
    """

    value: np.ndarray
    linear_solve_residual: float


@dataclass(frozen=True)
class HyperHessianResult:
    """
    Attributes:
        matrix (np.ndarray): d1 x d1 hyper-Hessian
        min_sym_eigenvalue (float): Smallest eigenvalue of its symmetric part
    """

    matrix: np.ndarray
    min_sym_eigenvalue: float


def _smallest_eigenvalue(a):
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


def spd_factor(hyy):
    """
    Cholesky-factor an inner Hessian.

    Args:
        hyy (np.ndarray): d2 x d2 matrix expected to be positive definite

    Returns:
        tuple: scipy cho_factor result
    """
    hyy = np.asarray(hyy, dtype=float)
    try:
        factor = cho_factor(hyy, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        raise SingularityError(
            "inner Hessian is not positive definite "
            f"(smallest eigenvalue {_smallest_eigenvalue(hyy):.6e})"
        ) from None
    pivots = np.abs(np.diag(factor[0])) ** 2
    if pivots.min() < _PIVOT_RATIO_MIN * pivots.max():
        raise SingularityError(
            "inner Hessian is numerically singular "
            f"(smallest eigenvalue {_smallest_eigenvalue(hyy):.6e})"
        )
    return factor


def _point(prob, x, y):
    x = np.asarray(x, dtype=float).reshape(prob.d1)
    y = np.asarray(y, dtype=float).reshape(prob.d2)
    return x, y


def hypergrad(prob, x, y):
    """
    Corrected outer gradient at a single point.

    Args:
        prob (BilevelProblem): Problem
        x (np.ndarray): Outer point, shape (d1,)
        y (np.ndarray): Inner point, shape (d2,)

    Returns:
        HypergradResult: value and residual of the inner linear solve
    """
    x, y = _point(prob, x, y)
    gx = np.asarray(prob.grad_x_f(x, y), dtype=float).reshape(prob.d1)
    gy = np.asarray(prob.grad_y_f(x, y), dtype=float).reshape(prob.d2)
    hyy = np.asarray(prob.hess_yy_g(x, y), dtype=float).reshape(prob.d2, prob.d2)
    hxy = np.asarray(prob.hess_xy_g(x, y), dtype=float).reshape(prob.d1, prob.d2)

    v = cho_solve(spd_factor(hyy), gy)
    residual = float(np.linalg.norm(hyy @ v - gy))
    return HypergradResult(value=gx - hxy @ v, linear_solve_residual=residual)


def evaluate_rows(oracle, x, y, vectorized):
    """Call an oracle on a batch, looping over rows when it cannot broadcast."""
    if vectorized:
        return np.asarray(oracle(x, y), dtype=float)
    rows = [np.asarray(oracle(xi, yi), dtype=float) for xi, yi in zip(x, y)]
    return np.stack(rows)


class HypergradOperator:
    """
    Batched outer drift for the SDE engine.

    Evaluates the hypergradient (or, in partial mode, grad_x f alone) on
    arrays of states with shape (R, d1) and (R, d2). When the problem declares
    constant Hessians the correction matrix [hess_yy g]^(-1) hess_xy g^T is
    solved for once at construction.

    Attributes:
        prob (BilevelProblem): Problem
        mode (str): "hypergradient" or "partial"
    """

    def __init__(self, prob, mode=config.OUTER_GRADIENT_HYPERGRAD):
        if mode not in config.OUTER_GRADIENT_MODES:
            raise ArgumentError(f"unknown outer gradient mode '{mode}'")
        self.prob = prob
        self.mode = mode
        self._correction = None
        if mode == config.OUTER_GRADIENT_HYPERGRAD and prob.constant_hessians:
            x0 = np.zeros(prob.d1)
            y0 = np.zeros(prob.d2)
            hyy = np.asarray(prob.hess_yy_g(x0, y0), dtype=float).reshape(prob.d2, prob.d2)
            hxy = np.asarray(prob.hess_xy_g(x0, y0), dtype=float).reshape(prob.d1, prob.d2)
            # (d2, d1): rows of grad_y f times this give the correction term
            self._correction = cho_solve(spd_factor(hyy), hxy.T)

    def outer(self, x, y):
        prob = self.prob
        gx = evaluate_rows(prob.grad_x_f, x, y, prob.vectorized)
        if self.mode == config.OUTER_GRADIENT_PARTIAL:
            return gx
        gy = evaluate_rows(prob.grad_y_f, x, y, prob.vectorized)
        if self._correction is not None:
            return gx - gy @ self._correction

        d1, d2 = prob.d1, prob.d2
        hyy = np.asarray(evaluate_rows(prob.hess_yy_g, x, y, prob.vectorized), dtype=float).reshape(-1, d2, d2)
        hxy = np.asarray(evaluate_rows(prob.hess_xy_g, x, y, prob.vectorized), dtype=float).reshape(-1, d1, d2)
        rhs = np.asarray(gy, dtype=float).reshape(-1, d2)
        try:
            v = np.stack([cho_solve(spd_factor(h), g) for h, g in zip(hyy, rhs)])
        except SingularityError as exc:
            raise SingularityError(f"along the trajectory: {exc}") from None
        return gx - np.einsum("rij,rj->ri", hxy, v).reshape(np.shape(gx))

    def inner(self, x, y):
        return evaluate_rows(self.prob.grad_y_g, x, y, self.prob.vectorized)


def largest_eigenvalue(a, iterations=config.POWER_ITERATIONS, seed=0):
    """Power-iteration estimate of the largest eigenvalue of a symmetric PSD matrix."""
    a = np.asarray(a, dtype=float)
    v = np.random.default_rng(seed).standard_normal(a.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(v @ a @ v)


def solve_inner(prob, x, tol=config.INNER_SOLVE_TOL, max_iters=config.INNER_SOLVE_MAX_ITERS, y0=None):
    """
    Minimize y -> g(x, y).

    Uses the problem's closed-form inner solution when it has one; otherwise
    runs gradient descent with step 1/L, L a power-iteration estimate of the
    largest eigenvalue of hess_yy g at the current iterate.

    Args:
        prob (BilevelProblem): Problem
        x (np.ndarray): Outer point
        tol (float): Stop when ||grad_y g|| <= tol
        max_iters (int): Iteration budget
        y0 (np.ndarray): Optional starting point (zeros by default)

    Returns:
        np.ndarray: y*(x), shape (d2,)
    """
    if not tol > 0:
        raise ArgumentError(f"solve_inner tolerance must be positive, got {tol}")
    x = np.asarray(x, dtype=float).reshape(prob.d1)
    if prob.inner_solution is not None:
        return np.asarray(prob.inner_solution(x), dtype=float).reshape(prob.d2)

    y = np.zeros(prob.d2) if y0 is None else np.asarray(y0, dtype=float).reshape(prob.d2).copy()
    lipschitz = None
    residual = np.inf
    for _ in range(int(max_iters)):
        grad = np.asarray(prob.grad_y_g(x, y), dtype=float).reshape(prob.d2)
        residual = float(np.linalg.norm(grad))
        if residual <= tol:
            return y
        if lipschitz is None or not prob.constant_hessians:
            lipschitz = largest_eigenvalue(prob.hess_yy_g(x, y))
        y = y - grad / lipschitz
    raise NonConvergenceError(f"inner solve for '{prob.name}' hit {max_iters} iterations", residual)


def phi(prob, x, tol=config.INNER_SOLVE_TOL):
    """Outer objective Phi(x) = f(x, y*(x))."""
    x = np.asarray(x, dtype=float).reshape(prob.d1)
    if prob.phi_closed_form is not None:
        return float(prob.phi_closed_form(x))
    return float(prob.f(x, solve_inner(prob, x, tol=tol)))


def phi_grad_fd(prob, x, h=config.FD_PHI_STEP, tol=config.INNER_SOLVE_TOL):
    """
    Central-difference gradient of Phi.

    Args:
        prob (BilevelProblem): Problem
        x (np.ndarray): Outer point
        h (float): Relative step, scaled by 1 + ||x||
        tol (float): Inner-solve tolerance, clipped to h^2

    Returns:
        np.ndarray: Approximate grad Phi(x), shape (d1,)
    """
    if not h > 0:
        raise ArgumentError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float).reshape(prob.d1)
    inner_tol = min(tol, h * h)
    step = fd_step(x, h)
    return central_jacobian(lambda z: np.atleast_1d(phi(prob, z, tol=inner_tol)), x, step)[0]


def resolve_second_derivatives(prob):
    """
    Complete the problem's second-derivative oracles.

    Missing oracles are replaced by central differences of the hypergradient
    and of grad_y g, with step 1e-5 * (1 + ||point||).

    Returns:
        SecondDerivatives: every oracle populated
    """
    given = prob.second_derivatives or SecondDerivatives()

    def jac_x_hypergrad(x, y):
        return central_jacobian(lambda z: hypergrad(prob, z, y).value, x, fd_step(x))

    def jac_y_hypergrad(x, y):
        return central_jacobian(lambda z: hypergrad(prob, x, z).value, y, fd_step(y))

    def jac_x_grad_y_g(x, y):
        return central_jacobian(
            lambda z: np.asarray(prob.grad_y_g(z, y), dtype=float).reshape(prob.d2), x, fd_step(x)
        )

    return SecondDerivatives(
        jac_x_hypergrad=given.jac_x_hypergrad or jac_x_hypergrad,
        jac_y_hypergrad=given.jac_y_hypergrad or jac_y_hypergrad,
        jac_x_grad_y_g=given.jac_x_grad_y_g or jac_x_grad_y_g,
    )


def hyper_hessian(prob, x, y):
    """
    Outer curvature at (x, y):

        jac_x[hypergrad] - hess_xy g [hess_yy g]^(-1) jac_y[hypergrad]^T.

    Args:
        prob (BilevelProblem): Problem
        x (np.ndarray): Outer point
        y (np.ndarray): Inner point

    Returns:
        HyperHessianResult: matrix and smallest symmetric-part eigenvalue
    """
    x, y = _point(prob, x, y)
    oracles = resolve_second_derivatives(prob)
    jx = np.asarray(oracles.jac_x_hypergrad(x, y), dtype=float).reshape(prob.d1, prob.d1)
    jy = np.asarray(oracles.jac_y_hypergrad(x, y), dtype=float).reshape(prob.d1, prob.d2)
    hyy = np.asarray(prob.hess_yy_g(x, y), dtype=float).reshape(prob.d2, prob.d2)
    hxy = np.asarray(prob.hess_xy_g(x, y), dtype=float).reshape(prob.d1, prob.d2)

    matrix = jx - hxy @ cho_solve(spd_factor(hyy), jy.T)
    return HyperHessianResult(matrix=matrix, min_sym_eigenvalue=_smallest_eigenvalue(matrix))


def hyper_hessian_fd(prob, x, h=config.FD_HYPERGRAD_STEP, tol=config.INNER_SOLVE_TOL):
    """Central differences of x -> hypergrad(x, y*(x)), the audit for hyper_hessian."""
    if not h > 0:
        raise ArgumentError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float).reshape(prob.d1)

    def along_inner_solution(z):
        return hypergrad(prob, z, solve_inner(prob, z, tol=tol)).value

    return central_jacobian(along_inner_solution, x, fd_step(x, h))


def stationarity_residuals(prob, x, y):
    """Return (||grad_y g(x, y)||, ||hypergrad(x, y)||)."""
    x, y = _point(prob, x, y)
    inner = float(np.linalg.norm(np.asarray(prob.grad_y_g(x, y), dtype=float)))
    outer = float(np.linalg.norm(hypergrad(prob, x, y).value))
    return inner, outer


def find_optimum(prob, x0=None, tol=config.OPTIMUM_TOL, max_iters=config.OPTIMUM_MAX_ITERS):
    """
    Locate (x*, y*) by deterministic gradient descent on Phi.

    The step is 1/L with L the largest eigenvalue of the symmetrised
    hyper-Hessian at the starting point. Problems with a known optimum return
    it directly.

    Returns:
        tuple: (x*, y*) as arrays
    """
    if prob.known_optimum is not None:
        return prob.known_optimum
    x = np.zeros(prob.d1) if x0 is None else np.asarray(x0, dtype=float).reshape(prob.d1).copy()
    y = solve_inner(prob, x)
    curvature = hyper_hessian(prob, x, y).matrix
    lipschitz = float(np.linalg.eigvalsh(0.5 * (curvature + curvature.T))[-1])
    if not lipschitz > 0:
        raise NonConvergenceError(f"outer curvature of '{prob.name}' is not positive", np.inf)

    residual = np.inf
    for iteration in range(int(max_iters)):
        grad = hypergrad(prob, x, y).value
        residual = float(np.linalg.norm(grad))
        if residual <= tol:
            logger.info("Optimum of '%s' located after %d iterations", prob.name, iteration)
            return x, y
        x = x - grad / lipschitz
        y = solve_inner(prob, x, y0=y)
    raise NonConvergenceError(f"optimum search for '{prob.name}' hit {max_iters} iterations", residual)


# ===========================
# GRADIENT AUDIT
# ===========================

@dataclass
class GradientAudit:
    """
    Hypergradient and hyper-Hessian against finite differences of Phi.

    Errors are relative, ||analytic - fd|| / (1 + ||fd||).

    Attributes:
        entries (list): One dict per audited point
        max_grad_error (float): Worst hypergradient error
        max_hessian_error (float): Worst hyper-Hessian error
        worst (dict): Point index, point and coordinate of the worst hypergradient error
        tol (float): Pass threshold
    """

    entries: list
    max_grad_error: float
    max_hessian_error: float
    worst: dict
    tol: float

    @property
    def passed(self):
        return bool(max(self.max_grad_error, self.max_hessian_error) <= self.tol)

    def as_dict(self):
        return {
            "pass": self.passed,
            "tol": self.tol,
            "max_error": max(self.max_grad_error, self.max_hessian_error),
            "max_grad_error": self.max_grad_error,
            "max_hessian_error": self.max_hessian_error,
            "worst": dict(self.worst),
            "points": list(self.entries),
        }


def _relative_error(analytic, reference):
    return float(np.linalg.norm(analytic - reference) / (1.0 + np.linalg.norm(reference)))


def audit_hypergradient(prob, points, tol=config.CHECK_GRAD_TOL):
    """
    Compare hypergrad(x, y*(x)) with phi_grad_fd(x) and hyper_hessian with
    hyper_hessian_fd at every point.

    Args:
        prob (BilevelProblem): Problem
        points (list): Outer points x
        tol (float): Largest accepted relative error

    Returns:
        GradientAudit: per-point errors and the verdict
    """
    entries = []
    worst = {"index": None, "x": None, "coordinate": None, "grad_error": -1.0}
    for index, x in enumerate(points):
        x = np.asarray(x, dtype=float).reshape(prob.d1)
        y = solve_inner(prob, x)
        analytic = hypergrad(prob, x, y).value
        reference = phi_grad_fd(prob, x)
        grad_error = _relative_error(analytic, reference)
        coordinate = int(np.argmax(np.abs(analytic - reference)))
        hessian_error = _relative_error(hyper_hessian(prob, x, y).matrix, hyper_hessian_fd(prob, x))

        entries.append({
            "x": x.tolist(),
            "grad_error": grad_error,
            "hessian_error": hessian_error,
            "worst_coordinate": coordinate,
        })
        if grad_error > worst["grad_error"]:
            worst = {"index": index, "x": x.tolist(), "coordinate": coordinate, "grad_error": grad_error}

    audit = GradientAudit(
        entries=entries,
        max_grad_error=max(e["grad_error"] for e in entries),
        max_hessian_error=max(e["hessian_error"] for e in entries),
        worst=worst,
        tol=float(tol),
    )
    logger.info(
        "Gradient audit of '%s': max hypergradient error %.3e, max hyper-Hessian error %.3e",
        prob.name, audit.max_grad_error, audit.max_hessian_error,
    )
    return audit
