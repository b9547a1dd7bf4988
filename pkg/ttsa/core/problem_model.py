"""
TTSA Bilevel Toolkit - Problem Model Module
===========================================

Defines the bilevel problem abstraction

    min_x Phi(x) = f(x, y*(x))   subject to   y*(x) in argmin_y g(x, y),

the learning-rate schedules gamma_t = gamma0 * (delta + t)^(-eta) of both
timescales, and the checks run against them before any simulation:
schedule validation and sampled evidence for the regularity of f and g.

Oracles follow a batching contract: x has shape (..., d1) and y shape
(..., d2); vectors come back as (..., d) and matrices as (..., r, c). A
problem that cannot broadcast sets vectorized=False and callers evaluate it
row by row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ttsa import config
from ttsa.errors import ArgumentError, AssumptionViolation, ConfigurationError

Oracle = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SecondDerivatives:
    """
    Analytic second-derivative oracles at a single point (x, y).

    Attributes:
        jac_x_hypergrad (callable): d1 x d1 Jacobian of the hypergradient in x
        jac_y_hypergrad (callable): d1 x d2 Jacobian of the hypergradient in y
        jac_x_grad_y_g (callable): d2 x d1 Jacobian of grad_y g in x
    """

    jac_x_hypergrad: Optional[Oracle] = None
    jac_y_hypergrad: Optional[Oracle] = None
    jac_x_grad_y_g: Optional[Oracle] = None


@dataclass(frozen=True)
class BilevelProblem:
    """
    Outer objective f, inner objective g and their derivative oracles.

    Attributes:
        name (str): Identifier used in reports
        d1 (int): Dimension of the outer variable x
        d2 (int): Dimension of the inner variable y
        f, g (callable): Scalar objectives
        grad_x_f, grad_y_f, grad_y_g (callable): Gradient oracles
        hess_yy_g (callable): d2 x d2 inner Hessian
        hess_xy_g (callable): d1 x d2 mixed Hessian of g
        mu_g (float): Claimed strong-convexity constant of g in y
        second_derivatives (SecondDerivatives): Optional analytic oracles
        known_optimum (tuple): Optional (x*, y*)
        inner_solution (callable): Optional closed-form y*(x)
        phi_closed_form (callable): Optional closed-form Phi(x)
        vectorized (bool): Oracles broadcast over leading batch axes
        constant_hessians (bool): hess_yy_g and hess_xy_g do not depend on (x, y)
    """

    name: str
    d1: int
    d2: int
    f: Oracle
    grad_x_f: Oracle
    grad_y_f: Oracle
    g: Oracle
    grad_y_g: Oracle
    hess_yy_g: Oracle
    hess_xy_g: Oracle
    mu_g: float
    second_derivatives: Optional[SecondDerivatives] = None
    known_optimum: Optional[tuple] = None
    inner_solution: Optional[Callable[[np.ndarray], np.ndarray]] = None
    phi_closed_form: Optional[Callable[[np.ndarray], np.ndarray]] = None
    vectorized: bool = True
    constant_hessians: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.d1) < 1 or int(self.d2) < 1:
            raise ConfigurationError(
                f"problem '{self.name}': dimensions must be positive, got d1={self.d1}, d2={self.d2}"
            )
        if not self.mu_g > 0:
            raise ConfigurationError(
                f"problem '{self.name}': mu_g must be positive, got {self.mu_g}"
            )
        if self.known_optimum is not None:
            x_star, y_star = self.known_optimum
            x_star = np.asarray(x_star, dtype=float).reshape(self.d1)
            y_star = np.asarray(y_star, dtype=float).reshape(self.d2)
            object.__setattr__(self, "known_optimum", (x_star, y_star))

    def has_optimum(self):
        """Whether a closed-form optimum was supplied."""
        return self.known_optimum is not None


# ===========================
# LEARNING RATES
# ===========================

@dataclass(frozen=True)
class LearningRateSchedule:
    """
    Polynomially decaying learning rate gamma_t = gamma0 * (delta + t)^(-eta).

    The exponent range is not enforced here; validate_schedules() reports it
    as a value so configurations can be diagnosed rather than refused outright.
    """

    gamma0: float
    delta: float
    eta: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma0) and self.gamma0 > 0):
            raise ArgumentError(f"gamma0 must be positive, got {self.gamma0}")
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ArgumentError(f"delta must be positive, got {self.delta}")
        if not np.isfinite(self.eta):
            raise ArgumentError(f"eta must be finite, got {self.eta}")

    def eval(self, t):
        return schedule_eval(self, t)

    def as_dict(self):
        return {"gamma0": self.gamma0, "delta": self.delta, "eta": self.eta}


@dataclass(frozen=True)
class SchedulePair:
    """
    Learning rates of both recursions.

    Attributes:
        outer (LearningRateSchedule): Slow timescale (x updates)
        inner (LearningRateSchedule): Fast timescale (y updates)
    """

    outer: LearningRateSchedule
    inner: LearningRateSchedule

    def rates(self, t):
        """Return (gamma1(t), gamma2(t))."""
        return schedule_eval(self.outer, t), schedule_eval(self.inner, t)


@dataclass(frozen=True)
class ScheduleValidation:
    """
    Outcome of validate_schedules().

    Attributes:
        accepted (bool): Both clauses hold
        clause (str): "range" or "ordering" when rejected, else None
        message (str): Human-readable reason
    """

    accepted: bool
    clause: Optional[str] = None
    message: str = "schedules satisfy the learning-rate conditions"

    def raise_if_rejected(self):
        if not self.accepted:
            raise AssumptionViolation("Assumption 1 (learning-rate schedule)", self.message)


def schedule_eval(s, t):
    """
    Evaluate a learning-rate schedule.

    Args:
        s (LearningRateSchedule): Schedule
        t (float or np.ndarray): Non-negative time(s)

    Returns:
        float or np.ndarray: gamma0 * (delta + t)^(-eta)
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or not np.all(np.isfinite(t_arr)):
        raise ArgumentError(f"schedule evaluated outside its domain t >= 0: {t}")
    value = s.gamma0 * np.power(s.delta + t_arr, -s.eta)
    if value.ndim == 0:
        return float(value)
    return value


def validate_schedules(p):
    """
    Check the exponent clauses of the learning-rate assumption.

    Both exponents must lie in the open interval (1/2, 1) and the outer one must
    be strictly larger, so the inner recursion runs on the faster timescale.

    Args:
        p (SchedulePair): Schedules to check

    Returns:
        ScheduleValidation: accepted, or the first failed clause
    """
    for label, schedule in (("outer", p.outer), ("inner", p.inner)):
        if not 0.5 < schedule.eta < 1.0:
            return ScheduleValidation(
                accepted=False,
                clause="range",
                message=f"{label} exponent eta={schedule.eta} is outside (1/2, 1)",
            )
    if not p.outer.eta > p.inner.eta:
        return ScheduleValidation(
            accepted=False,
            clause="ordering",
            message=(
                f"outer exponent eta1={p.outer.eta} must exceed inner exponent "
                f"eta2={p.inner.eta} (eta2 < eta1)"
            ),
        )
    return ScheduleValidation(accepted=True)


# ===========================
# FINITE DIFFERENCES
# ===========================

def fd_step(point, rel_step=config.FD_FALLBACK_REL_STEP):
    """Step h = rel_step * (1 + ||point||) used by every central difference."""
    return rel_step * (1.0 + float(np.linalg.norm(point)))


def central_jacobian(fn, point, h):
    """
    Central-difference Jacobian of a vector function at a single point.

    Args:
        fn (callable): Maps an (n,) array to an (m,) array
        point (np.ndarray): Evaluation point, shape (n,)
        h (float): Step

    Returns:
        np.ndarray: (m, n) Jacobian, column j = d fn / d point_j
    """
    point = np.asarray(point, dtype=float)
    columns = []
    for j in range(point.size):
        e = np.zeros_like(point)
        e[j] = h
        columns.append((np.asarray(fn(point + e)) - np.asarray(fn(point - e))) / (2.0 * h))
    return np.stack(columns, axis=-1)


# ===========================
# ASSUMPTION CHECKS
# ===========================

@dataclass
class AssumptionReport:
    """
    Sampled evidence for the regularity assumptions on f and g.

    Lipschitz figures are the largest difference quotient seen over random
    probes; they are evidence, never a proof of a global constant.

    Attributes:
        min_eigenvalue (float): Smallest eigenvalue of hess_yy_g over the samples
        mu_g (float): Claimed strong-convexity constant
        eigenvalue_flagged (bool): min_eigenvalue < mu_g
        lipschitz (dict): Max quotient per gradient oracle and direction
        symmetry_residuals (list): Relative asymmetry of hess_yy_g per sample
        symmetry_flagged (bool): Some residual exceeds the symmetry tolerance
        n_samples (int): Number of sample points
    """

    min_eigenvalue: float
    mu_g: float
    eigenvalue_flagged: bool
    lipschitz: dict
    symmetry_residuals: list
    symmetry_flagged: bool
    n_samples: int

    @property
    def passed(self):
        return not (self.eigenvalue_flagged or self.symmetry_flagged)

    def as_dict(self):
        return {
            "min_eigenvalue": self.min_eigenvalue,
            "mu_g": self.mu_g,
            "eigenvalue_flagged": self.eigenvalue_flagged,
            "lipschitz": dict(self.lipschitz),
            "max_symmetry_residual": max(self.symmetry_residuals),
            "symmetry_flagged": self.symmetry_flagged,
            "n_samples": self.n_samples,
            "pass": self.passed,
        }


def symmetry_residual(a):
    """Relative Frobenius asymmetry ||A - A^T||_F / ||A||_F (0 for A = 0)."""
    a = np.asarray(a, dtype=float)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - a.T) / scale)


def _max_quotient(grad, base_x, base_y, rng, wrt, n_probes, scale):
    best = 0.0
    ref = np.asarray(grad(base_x, base_y), dtype=float)
    base = base_y if wrt == "y" else base_x
    radius = scale * (1.0 + np.linalg.norm(base))
    for _ in range(n_probes):
        direction = rng.standard_normal(base.shape)
        direction *= radius / np.linalg.norm(direction)
        if wrt == "y":
            moved = np.asarray(grad(base_x, base_y + direction), dtype=float)
        else:
            moved = np.asarray(grad(base_x + direction, base_y), dtype=float)
        best = max(best, float(np.linalg.norm(moved - ref) / np.linalg.norm(direction)))
    return best


def check_assumptions(prob, sample_points, seed=0):
    """
    Collect sampled evidence for the regularity assumptions.

    Args:
        prob (BilevelProblem): Problem to check
        sample_points (list): (x, y) pairs
        seed (int): Seed of the random probe directions

    Returns:
        AssumptionReport: Eigenvalue, Lipschitz and symmetry findings
    """
    points = list(sample_points)
    if not points:
        raise ArgumentError("check_assumptions needs at least one sample point")

    rng = np.random.default_rng(seed)
    min_eig = np.inf
    residuals = []
    lipschitz = {
        "grad_y_g_wrt_y": 0.0,
        "grad_x_f_wrt_y": 0.0,
        "grad_y_f_wrt_y": 0.0,
        "grad_y_f_wrt_x": 0.0,
    }
    probes = (
        ("grad_y_g_wrt_y", prob.grad_y_g, "y"),
        ("grad_x_f_wrt_y", prob.grad_x_f, "y"),
        ("grad_y_f_wrt_y", prob.grad_y_f, "y"),
        ("grad_y_f_wrt_x", prob.grad_y_f, "x"),
    )

    for x, y in points:
        x = np.asarray(x, dtype=float).reshape(prob.d1)
        y = np.asarray(y, dtype=float).reshape(prob.d2)
        hess = np.asarray(prob.hess_yy_g(x, y), dtype=float).reshape(prob.d2, prob.d2)
        residuals.append(symmetry_residual(hess))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (hess + hess.T))[0]))
        for key, grad, wrt in probes:
            quotient = _max_quotient(
                grad, x, y, rng, wrt, config.LIPSCHITZ_PROBES, config.LIPSCHITZ_PROBE_SCALE
            )
            lipschitz[key] = max(lipschitz[key], quotient)

    return AssumptionReport(
        min_eigenvalue=min_eig,
        mu_g=float(prob.mu_g),
        eigenvalue_flagged=bool(min_eig < prob.mu_g - config.SYMMETRY_RTOL * max(1.0, abs(prob.mu_g))),
        lipschitz=lipschitz,
        symmetry_residuals=residuals,
        symmetry_flagged=bool(max(residuals) > config.SYMMETRY_RTOL),
        n_samples=len(points),
    )


def sample_points_around(prob, center_x, center_y, n, seed, radius=1.0):
    """Seeded Gaussian cloud of (x, y) points around a centre."""
    rng = np.random.default_rng(seed)
    cx = np.asarray(center_x, dtype=float).reshape(prob.d1)
    cy = np.asarray(center_y, dtype=float).reshape(prob.d2)
    return [
        (cx + radius * rng.standard_normal(prob.d1), cy + radius * rng.standard_normal(prob.d2))
        for _ in range(n)
    ]


def as_vector(values: Sequence, dim: int) -> np.ndarray:
    """Coerce a config vector to a float array of the given dimension."""
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size != dim:
        raise ConfigurationError(f"expected a vector of length {dim}, got {arr.size}")
    return arr
