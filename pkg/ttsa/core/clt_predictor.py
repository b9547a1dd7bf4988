"""
TTSA Bilevel Toolkit - CLT Predictor Module
===========================================

Linearizes the two-timescale dynamics at the optimum and computes the
limiting covariances of the rescaled errors

    (gamma1(t))^(-1/2) (x_t - x*) -> N(0, Sigma_x)
    (gamma2(t))^(-1/2) (y_t - y*) -> N(0, Sigma_y)

as solutions of the Lyapunov equations

    H Sigma_x + Sigma_x H^T + Q_x = 0,    A22 Sigma_y + Sigma_y A22^T + G22 = 0,

with H = A11 - A12 A22^(-1) A21. A composite Gauss-Legendre quadrature of
the integral int_0^inf exp(At) Q exp(A^T t) dt serves as an independent
check on the Lyapunov solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from ttsa import config
from ttsa.core.hypergradient import resolve_second_derivatives, spd_factor, stationarity_residuals
from ttsa.core.problem_model import symmetry_residual
from ttsa.errors import AccuracyError, ArgumentError, NumericalError, StabilityError, stage

logger = logging.getLogger("Predict")


def _square(m, label="matrix"):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ArgumentError(f"{label} must be square, got shape {m.shape}")
    return m


def _symmetrize(m):
    return 0.5 * (m + m.T)


@dataclass(frozen=True, eq=False)
class LinearizationMatrices:
    """
    Jacobian blocks of the negated drift at (x*, y*).

    Attributes:
        A11 (np.ndarray): d1 x d1, minus the x-Jacobian of the hypergradient
        A12 (np.ndarray): d1 x d2, minus its y-Jacobian
        A21 (np.ndarray): d2 x d1, minus the x-Jacobian of grad_y g
        A22 (np.ndarray): d2 x d2, minus hess_yy g
        H (np.ndarray): Schur complement A11 - A12 A22^(-1) A21
    """

    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    H: np.ndarray

    def schur_residual(self):
        """Frobenius distance between H and a fresh A11 - A12 A22^(-1) A21."""
        return float(np.linalg.norm(self.H - schur_complement(self.A11, self.A12, self.A21, self.A22)))

    def as_dict(self):
        return {name: getattr(self, name).tolist() for name in ("A11", "A12", "A21", "A22", "H")}


@dataclass(frozen=True, eq=False)
class NoiseLimits:
    """
    Limiting noise covariances at the optimum.

    Attributes:
        G11 (np.ndarray): d1 x d1
        G22 (np.ndarray): d2 x d2
        G12 (np.ndarray): d1 x d2; G21 is its transpose
    """

    G11: np.ndarray
    G22: np.ndarray
    G12: np.ndarray

    def __post_init__(self):
        joint = np.block([[self.G11, self.G12], [self.G12.T, self.G22]])
        for label, block in (("G11", self.G11), ("G22", self.G22)):
            if symmetry_residual(block) > config.SYMMETRY_RTOL:
                raise ArgumentError(f"noise limit {label} is not symmetric")
        eigenvalues = np.linalg.eigvalsh(_symmetrize(joint))
        scale = max(1.0, float(np.trace(joint)))
        if eigenvalues[0] < -1e-10 * scale:
            raise ArgumentError(
                f"joint noise covariance is not positive semi-definite (smallest eigenvalue {eigenvalues[0]:.3e})"
            )

    @property
    def G21(self):
        return self.G12.T

    @classmethod
    def from_noise(cls, noise):
        g11, g22, g12 = noise.limits()
        return cls(G11=g11, G22=g22, G12=g12)

    def as_dict(self):
        return {
            "G11": self.G11.tolist(),
            "G22": self.G22.tolist(),
            "G12": self.G12.tolist(),
            "G21": self.G21.tolist(),
        }


@dataclass(eq=False)
class CLTPrediction:
    """
    Limit covariances with the inputs they were computed from.

    Attributes:
        Sigma_x (np.ndarray): d1 x d1
        Sigma_y (np.ndarray): d2 x d2
        lyapunov_residuals (tuple): Relative residuals of both equations
        linearization (LinearizationMatrices): A-blocks and H
        limits (NoiseLimits): Gamma limits
        Qx (np.ndarray): Forcing term of the Sigma_x equation
        hurwitz_margins (dict): Largest eigenvalue real part of H and A22
        quadrature_agreement (dict): Relative distance to the quadrature oracle, when checked
    """

    Sigma_x: np.ndarray
    Sigma_y: np.ndarray
    lyapunov_residuals: tuple
    linearization: LinearizationMatrices
    limits: NoiseLimits
    Qx: np.ndarray
    hurwitz_margins: dict
    x_star: np.ndarray
    y_star: np.ndarray
    quadrature_agreement: Optional[dict] = field(default=None)

    def as_dict(self):
        return {
            "x_star": self.x_star.tolist(),
            "y_star": self.y_star.tolist(),
            "linearization": self.linearization.as_dict(),
            "hurwitz_margins": dict(self.hurwitz_margins),
            "noise_limits": self.limits.as_dict(),
            "Qx": self.Qx.tolist(),
            "Sigma_x": self.Sigma_x.tolist(),
            "Sigma_y": self.Sigma_y.tolist(),
            "lyapunov_residuals": {"Sigma_x": self.lyapunov_residuals[0], "Sigma_y": self.lyapunov_residuals[1]},
            "quadrature_agreement": self.quadrature_agreement,
        }


def schur_complement(a11, a12, a21, a22):
    return a11 - a12 @ np.linalg.solve(a22, a21)


def linearize(prob, x_star, y_star):
    """
    A-blocks of the linearized dynamics at a stationary point.

    Args:
        prob (BilevelProblem): Problem
        x_star (np.ndarray): Outer optimum
        y_star (np.ndarray): Inner optimum

    Returns:
        LinearizationMatrices: A11, A12, A21, A22 and H
    """
    x_star = np.asarray(x_star, dtype=float).reshape(prob.d1)
    y_star = np.asarray(y_star, dtype=float).reshape(prob.d2)
    inner_res, outer_res = stationarity_residuals(prob, x_star, y_star)
    if max(inner_res, outer_res) > config.LINEARIZE_STATIONARITY_TOL:
        raise ArgumentError(
            f"({x_star}, {y_star}) is not stationary: ||grad_y g|| = {inner_res:.3e}, "
            f"||hypergrad|| = {outer_res:.3e}"
        )

    oracles = resolve_second_derivatives(prob)
    a11 = -np.asarray(oracles.jac_x_hypergrad(x_star, y_star), dtype=float).reshape(prob.d1, prob.d1)
    a12 = -np.asarray(oracles.jac_y_hypergrad(x_star, y_star), dtype=float).reshape(prob.d1, prob.d2)
    a21 = -np.asarray(oracles.jac_x_grad_y_g(x_star, y_star), dtype=float).reshape(prob.d2, prob.d1)
    a22 = -np.asarray(prob.hess_yy_g(x_star, y_star), dtype=float).reshape(prob.d2, prob.d2)

    spd_factor(-a22)
    return LinearizationMatrices(A11=a11, A12=a12, A21=a21, A22=a22, H=schur_complement(a11, a12, a21, a22))


def hurwitz_margin(m):
    """Largest real part over the eigenvalues of a square matrix."""
    m = _square(m)
    try:
        eigenvalues = np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue computation did not converge: {exc}") from None
    return float(np.max(eigenvalues.real))


def _require_hurwitz(a, label):
    margin = hurwitz_margin(a)
    if not margin < config.HURWITZ_MARGIN:
        raise StabilityError(
            f"{label} is not Hurwitz: largest eigenvalue real part {margin:.6e} "
            f"is not below {config.HURWITZ_MARGIN:g}"
        )
    return margin


def assemble_Qx(lin, limits):
    """
    Forcing term of the outer Lyapunov equation,

        G11 + K G22 K^T - G12 K^T - K G21   with K = A12 A22^(-1),

    symmetrized after assembly.
    """
    k = np.linalg.solve(lin.A22.T, lin.A12.T).T
    q = limits.G11 + k @ limits.G22 @ k.T - limits.G12 @ k.T - k @ limits.G21
    return _symmetrize(q)


def lyapunov_residual(a, sigma, q):
    """||A Sigma + Sigma A^T + Q||_F relative to ||Q||_F (absolute when Q = 0)."""
    residual = float(np.linalg.norm(a @ sigma + sigma @ a.T + q))
    scale = float(np.linalg.norm(q))
    return residual / scale if scale > 0 else residual


def lyapunov_solve(a, q):
    """
    Solve A Sigma + Sigma A^T + Q = 0 for Hurwitz A.

    Vectorizes the operator Sigma -> A Sigma + Sigma A^T as kron(A, I) + kron(I, A)
    and solves the d^2 linear system directly.

    Args:
        a (np.ndarray): d x d Hurwitz matrix
        q (np.ndarray): d x d symmetric forcing term

    Returns:
        np.ndarray: symmetric solution Sigma
    """
    a = _square(a, "A")
    q = _square(q, "Q")
    if q.shape != a.shape:
        raise ArgumentError(f"A and Q shapes differ: {a.shape} vs {q.shape}")
    _require_hurwitz(a, "A")
    if not np.any(q):
        return np.zeros_like(q)

    d = a.shape[0]
    eye = np.eye(d)
    operator = np.kron(a, eye) + np.kron(eye, a)
    try:
        vec = np.linalg.solve(operator, -q.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Lyapunov system is singular: {exc}") from None
    sigma = _symmetrize(vec.reshape(d, d))

    residual = lyapunov_residual(a, sigma, q)
    if residual > config.LYAPUNOV_RESIDUAL_RTOL:
        raise AccuracyError(f"Lyapunov residual {residual:.3e} exceeds {config.LYAPUNOV_RESIDUAL_RTOL:g}")
    return sigma


def frozen_rate_cross_block(lin, limits, gamma1, gamma2):
    """
    Cross covariance of the rescaled errors with the learning rates frozen.

    Solves the joint Lyapunov equation of the linearized pair with drift
    diag(gamma1 I, gamma2 I) A and noise diag(gamma1, gamma2) G diag(gamma1, gamma2),
    then rescales the off-diagonal block by (gamma1 gamma2)^(-1/2). The block
    vanishes as gamma1 / gamma2 -> 0, so at a finite horizon it measures how far
    the limit's block-diagonal form still is.

    Args:
        lin (LinearizationMatrices): A-blocks at the optimum
        limits (NoiseLimits): Gamma limits
        gamma1 (float): Outer learning rate
        gamma2 (float): Inner learning rate

    Returns:
        np.ndarray: d1 x d2 rescaled cross covariance
    """
    if not (gamma1 > 0 and gamma2 > 0):
        raise ArgumentError(f"learning rates must be positive, got ({gamma1}, {gamma2})")
    d1, d2 = lin.A11.shape[0], lin.A22.shape[0]
    a = np.block([[gamma1 * lin.A11, gamma1 * lin.A12], [gamma2 * lin.A21, gamma2 * lin.A22]])
    rates = np.concatenate([np.full(d1, float(gamma1)), np.full(d2, float(gamma2))])
    g = np.block([[limits.G11, limits.G12], [limits.G21, limits.G22]])
    joint = lyapunov_solve(a, g * np.outer(rates, rates))
    return joint[:d1, d1:] / np.sqrt(gamma1 * gamma2)


def matrix_exp(m):
    """
    Matrix exponential.

    Symmetric input goes through an eigendecomposition, anything else through
    scipy's scaling-and-squaring Pade approximant.
    """
    m = _square(m)
    with np.errstate(over="ignore", invalid="ignore"):
        if np.array_equal(m, m.T):
            w, v = np.linalg.eigh(m)
            result = (v * np.exp(w)) @ v.T
        else:
            result = expm(m)
    if not np.all(np.isfinite(result)):
        raise NumericalError(f"matrix exponential overflows (||M||_1 = {np.linalg.norm(m, 1):.3e})")
    return result


def lyapunov_quadrature_oracle(a, q, t_max, n_nodes):
    """
    Direct quadrature of int_0^t_max exp(At) Q exp(A^T t) dt.

    Composite Gauss-Legendre rule, QUADRATURE_ORDER nodes per panel and
    n_nodes // QUADRATURE_ORDER equal panels. Panel starts advance by
    multiplication with exp(A w), so only QUADRATURE_ORDER + 1 exponentials
    are evaluated.

    Args:
        a (np.ndarray): d x d Hurwitz matrix
        q (np.ndarray): d x d symmetric matrix
        t_max (float): Truncation point; ||exp(A t_max)||_2 must be <= 1e-12
        n_nodes (int): Total number of nodes

    Returns:
        np.ndarray: symmetric approximation of Sigma
    """
    a = _square(a, "A")
    q = _square(q, "Q")
    _require_hurwitz(a, "A")
    if not t_max > 0 or int(n_nodes) < 1:
        raise ArgumentError(f"need t_max > 0 and n_nodes >= 1, got {t_max}, {n_nodes}")
    tail = float(np.linalg.norm(matrix_exp(a * t_max), 2))
    if tail > config.QUADRATURE_TAIL_TOL:
        raise AccuracyError(
            f"t_max={t_max} leaves ||exp(A t_max)|| = {tail:.3e} above {config.QUADRATURE_TAIL_TOL:g}"
        )
    if not np.any(q):
        return np.zeros_like(q)

    panels = max(1, int(n_nodes) // config.QUADRATURE_ORDER)
    width = t_max / panels
    nodes, weights = np.polynomial.legendre.leggauss(config.QUADRATURE_ORDER)
    offsets = 0.5 * (nodes + 1.0) * width
    weights = 0.5 * width * weights
    local = [matrix_exp(a * s) for s in offsets]
    advance = matrix_exp(a * width)

    total = np.zeros_like(q)
    start = np.eye(a.shape[0])
    for _ in range(panels):
        for weight, exp_local in zip(weights, local):
            e = start @ exp_local
            total += weight * (e @ q @ e.T)
        start = start @ advance
    return _symmetrize(total)


def quadrature_settings(a):
    """
    Truncation point and node count for the quadrature oracle.

    t_max doubles from 30 / |margin| until the tail bound holds; panels are
    no wider than 0.25 / rho(A).
    """
    a = _square(a, "A")
    margin = _require_hurwitz(a, "A")
    t_max = 30.0 / abs(margin)
    for _ in range(20):
        if float(np.linalg.norm(matrix_exp(a * t_max), 2)) <= config.QUADRATURE_TAIL_TOL:
            break
        t_max *= 2.0
    spectral_radius = float(np.max(np.abs(np.linalg.eigvals(a))))
    panels = int(np.ceil(t_max * spectral_radius / 0.25))
    return t_max, max(1, panels) * config.QUADRATURE_ORDER


def _relative_distance(a, b):
    scale = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff / scale if scale > 0 else diff


def predict(prob, noise, x_star, y_star, cross_check=False):
    """
    Limit covariances of the rescaled errors at (x*, y*).

    Args:
        prob (BilevelProblem): Problem
        noise (NoiseModel): Observation noise; only its limiting diffusions matter
        x_star (np.ndarray): Outer optimum
        y_star (np.ndarray): Inner optimum
        cross_check (bool): Also run the quadrature oracle on both equations

    Returns:
        CLTPrediction: Sigma_x, Sigma_y and everything they were built from
    """
    with stage("linearize"):
        lin = linearize(prob, x_star, y_star)
    with stage("noise limits"):
        noise.check_dims(prob)
        limits = NoiseLimits.from_noise(noise)
    with stage("hurwitz"):
        margins = {"H": _require_hurwitz(lin.H, "H"), "A22": _require_hurwitz(lin.A22, "A22")}
    with stage("assemble Qx"):
        qx = assemble_Qx(lin, limits)
    with stage("lyapunov Sigma_x"):
        sigma_x = lyapunov_solve(lin.H, qx)
    with stage("lyapunov Sigma_y"):
        sigma_y = lyapunov_solve(lin.A22, limits.G22)

    agreement = None
    if cross_check:
        with stage("quadrature oracle"):
            agreement = {
                "Sigma_x": _relative_distance(lyapunov_quadrature_oracle(lin.H, qx, *quadrature_settings(lin.H)), sigma_x),
                "Sigma_y": _relative_distance(
                    lyapunov_quadrature_oracle(lin.A22, limits.G22, *quadrature_settings(lin.A22)), sigma_y
                ),
            }
        logger.info(
            "Quadrature oracle agreement: Sigma_x %.3e, Sigma_y %.3e", agreement["Sigma_x"], agreement["Sigma_y"]
        )

    logger.info("Predicted trace(Sigma_x)=%.6g, trace(Sigma_y)=%.6g", np.trace(sigma_x), np.trace(sigma_y))
    return CLTPrediction(
        Sigma_x=sigma_x,
        Sigma_y=sigma_y,
        lyapunov_residuals=(lyapunov_residual(lin.H, sigma_x, qx), lyapunov_residual(lin.A22, sigma_y, limits.G22)),
        linearization=lin,
        limits=limits,
        Qx=qx,
        hurwitz_margins=margins,
        x_star=np.asarray(x_star, dtype=float).reshape(prob.d1),
        y_star=np.asarray(y_star, dtype=float).reshape(prob.d2),
        quadrature_agreement=agreement,
    )
