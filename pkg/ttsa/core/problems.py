"""
TTSA Bilevel Toolkit - Built-in Problems Module
===============================================

Bilevel problems with closed-form solutions, selected by name from the run
configuration:

- quadratic1d:   f = (x^2 + y^2)/2, g = (y - x)^2/2, the canonical scalar instance
- quadratic:     f = (x-a)'P_f(x-a)/2 + (y-b)'R_f(y-b)/2, g = (y - C'x - c0)'P_g(...)/2
- maml:          shared parameter theta, N task adaptations regularised towards it
- langevin_toy:  decoupled inner problem V(z) = z'Pz/2, outer U = |theta - Mz - m|^2/2

Every objective is a quadratic form in the stacked variable (x, y), so all
oracles broadcast over batches and the Hessians are constant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag, cho_solve

from ttsa.core.hypergradient import spd_factor
from ttsa.core.problem_model import BilevelProblem, SecondDerivatives
from ttsa.errors import ConfigurationError


def _matrix(value, rows, cols, label):
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.shape != (rows, cols):
        raise ConfigurationError(f"{label} must have shape ({rows}, {cols}), got {arr.shape}")
    return arr


def _vector(value, dim, label):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size != dim:
        raise ConfigurationError(f"{label} must have length {dim}, got {arr.size}")
    return arr


def is_spd(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(a)[0] > 0)


def random_spd(dim, rng, low, high):
    """
    Random symmetric positive-definite matrix with eigenvalues in [low, high].

    The eigenbasis is the orthogonal factor of a QR decomposition of a seeded
    Gaussian matrix.
    """
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eigenvalues = rng.uniform(low, high, size=dim)
    a = (q * eigenvalues) @ q.T
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class QuadraticForm:
    """
    q(x, y) = z'Kz/2 + k'z + k0 with z = (x, y).

    Attributes:
        matrix (np.ndarray): Symmetric K, (d1 + d2) x (d1 + d2)
        linear (np.ndarray): k, length d1 + d2
        constant (float): k0
        d1 (int): Size of the x block
    """

    matrix: np.ndarray
    linear: np.ndarray
    constant: float
    d1: int

    @property
    def xx(self):
        return self.matrix[: self.d1, : self.d1]

    @property
    def xy(self):
        return self.matrix[: self.d1, self.d1:]

    @property
    def yy(self):
        return self.matrix[self.d1:, self.d1:]

    def _stack(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        x = np.broadcast_to(x, batch + x.shape[-1:])
        y = np.broadcast_to(y, batch + y.shape[-1:])
        return np.concatenate([x, y], axis=-1)

    def value(self, x, y):
        z = self._stack(x, y)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.matrix, z) + z @ self.linear + self.constant

    def gradient(self, x, y):
        return self._stack(x, y) @ self.matrix + self.linear

    def grad_x(self, x, y):
        return self.gradient(x, y)[..., : self.d1]

    def grad_y(self, x, y):
        return self.gradient(x, y)[..., self.d1:]


def _constant_block(block):
    def oracle(x, y):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.broadcast_to(block, batch + block.shape)
    return oracle


def _second_derivatives(f_form, g_form):
    """Exact Jacobians of the hypergradient for quadratic f and g."""
    factor = spd_factor(g_form.yy)
    gxy = g_form.xy
    # hess_xy g [hess_yy g]^(-1), shape (d1, d2)
    weight = cho_solve(factor, gxy.T).T
    jac_x = f_form.xx - weight @ f_form.xy.T
    jac_y = f_form.xy - weight @ f_form.yy
    return SecondDerivatives(
        jac_x_hypergrad=lambda x, y: jac_x,
        jac_y_hypergrad=lambda x, y: jac_y,
        jac_x_grad_y_g=lambda x, y: gxy.T,
    )


def quadratic_problem(name, f_form, g_form, *, mu_g, known_optimum, inner_solution,
                      phi_closed_form=None, params=None):
    """Assemble a BilevelProblem whose objectives are the given quadratic forms."""
    d1 = f_form.d1
    d2 = f_form.matrix.shape[0] - d1
    return BilevelProblem(
        name=name,
        d1=d1,
        d2=d2,
        f=f_form.value,
        grad_x_f=f_form.grad_x,
        grad_y_f=f_form.grad_y,
        g=g_form.value,
        grad_y_g=g_form.grad_y,
        hess_yy_g=_constant_block(g_form.yy.copy()),
        hess_xy_g=_constant_block(g_form.xy.copy()),
        mu_g=mu_g,
        second_derivatives=_second_derivatives(f_form, g_form),
        known_optimum=known_optimum,
        inner_solution=inner_solution,
        phi_closed_form=phi_closed_form,
        vectorized=True,
        constant_hessians=True,
        params=dict(params or {}),
    )


# ===========================
# QUADRATIC BILEVEL
# ===========================

@dataclass(frozen=True)
class QuadraticBilevel:
    """
    f = (x-a)'P_f(x-a)/2 + (y-b)'R_f(y-b)/2,  g = (y - C'x - c0)'P_g(y - C'x - c0)/2.

    Attributes:
        P_f (np.ndarray): d1 x d1 SPD
        R_f (np.ndarray): d2 x d2 SPD
        P_g (np.ndarray): d2 x d2 SPD
        C (np.ndarray): d1 x d2 coupling
        a, b, c0 (np.ndarray): Offsets
    """

    P_f: np.ndarray
    R_f: np.ndarray
    P_g: np.ndarray
    C: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c0: np.ndarray

    def __post_init__(self):
        for label in ("P_f", "R_f", "P_g"):
            if not is_spd(getattr(self, label)):
                raise ConfigurationError(f"quadratic problem: {label} must be symmetric positive definite")

    @property
    def d1(self):
        return self.P_f.shape[0]

    @property
    def d2(self):
        return self.P_g.shape[0]

    def inner_solution(self, x):
        return np.asarray(x, dtype=float) @ self.C + self.c0

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        dx = x - self.a
        dy = self.inner_solution(x) - self.b
        return 0.5 * dx @ self.P_f @ dx + 0.5 * dy @ self.R_f @ dy

    def optimum(self):
        lhs = self.P_f + self.C @ self.R_f @ self.C.T
        rhs = self.P_f @ self.a - self.C @ self.R_f @ (self.c0 - self.b)
        x_star = np.linalg.solve(lhs, rhs)
        return x_star, self.inner_solution(x_star)

    def to_problem(self, name="quadratic", params=None):
        d1, d2 = self.d1, self.d2
        f_form = QuadraticForm(
            matrix=block_diag(self.P_f, self.R_f),
            linear=np.concatenate([-self.P_f @ self.a, -self.R_f @ self.b]),
            constant=float(0.5 * self.a @ self.P_f @ self.a + 0.5 * self.b @ self.R_f @ self.b),
            d1=d1,
        )
        lift = np.hstack([-self.C.T, np.eye(d2)])  # y - C'x as a map of z = (x, y)
        g_form = QuadraticForm(
            matrix=lift.T @ self.P_g @ lift,
            linear=-lift.T @ self.P_g @ self.c0,
            constant=float(0.5 * self.c0 @ self.P_g @ self.c0),
            d1=d1,
        )
        return quadratic_problem(
            name,
            f_form,
            g_form,
            mu_g=float(np.linalg.eigvalsh(self.P_g)[0]),
            known_optimum=self.optimum(),
            inner_solution=self.inner_solution,
            phi_closed_form=self.phi,
            params=params,
        )


def make_quadratic_1d(broken_gradient=False):
    """
    f = (x^2 + y^2)/2, g = (y - x)^2/2 with optimum (0, 0) and y*(x) = x.

    Args:
        broken_gradient (bool): Shift grad_x f by a constant, a negative control
            for the gradient audit

    Returns:
        BilevelProblem: the canonical scalar instance
    """
    one = np.ones((1, 1))
    zero = np.zeros(1)
    problem = QuadraticBilevel(P_f=one, R_f=one, P_g=one, C=one, a=zero, b=zero, c0=zero).to_problem(
        name="quadratic1d", params={"broken_gradient": bool(broken_gradient)}
    )
    if not broken_gradient:
        return problem

    shift = np.array([0.05])
    honest = problem.grad_x_f
    return replace(problem, grad_x_f=lambda x, y: honest(x, y) + shift)


def make_quadratic(d1, d2, seed, coupling=1.0, offsets=True):
    """Seeded random QuadraticBilevel with eigenvalues in [0.5, 2]."""
    if d1 < 1 or d2 < 1:
        raise ConfigurationError(f"quadratic: dimensions must be positive, got d1={d1}, d2={d2}")
    rng = np.random.default_rng(seed)
    instance = QuadraticBilevel(
        P_f=random_spd(d1, rng, 0.5, 2.0),
        R_f=random_spd(d2, rng, 0.5, 2.0),
        P_g=random_spd(d2, rng, 0.5, 2.0),
        C=coupling * rng.standard_normal((d1, d2)) / np.sqrt(d2),
        a=rng.uniform(-1.0, 1.0, d1) if offsets else np.zeros(d1),
        b=rng.uniform(-1.0, 1.0, d2) if offsets else np.zeros(d2),
        c0=rng.uniform(-1.0, 1.0, d2) if offsets else np.zeros(d2),
    )
    return instance.to_problem(
        params={"d1": d1, "d2": d2, "seed": seed, "coupling": coupling, "offsets": offsets}
    )


# ===========================
# MAML
# ===========================

@dataclass(frozen=True)
class MAMLQuadratic:
    """
    Meta-learning over N quadratic tasks.

    Task i has loss L_i(v) = (v - mu_i)'C_i(v - mu_i)/2 and adaptation objective
    J_i(theta, v) = L_i(v) + lam/2 |v - theta|^2. The outer variable is theta,
    the inner variable the stack of the N adaptations.

    Attributes:
        Cs (np.ndarray): (N, p, p) SPD task curvatures
        mus (np.ndarray): (N, p) task optima
        lam (float): Coupling weight
    """

    Cs: np.ndarray
    mus: np.ndarray
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError(f"maml: coupling weight lam must be positive, got {self.lam}")
        if self.Cs.ndim != 3 or self.mus.shape != self.Cs.shape[:2]:
            raise ConfigurationError("maml: C must be (N, p, p) and mu must be (N, p)")
        for i, c in enumerate(self.Cs):
            if not is_spd(c):
                raise ConfigurationError(f"maml: task {i} curvature must be symmetric positive definite")

    @property
    def n_tasks(self):
        return self.Cs.shape[0]

    @property
    def p(self):
        return self.Cs.shape[1]

    def _shifted(self, i):
        return self.Cs[i] + self.lam * np.eye(self.p)

    def inner_solution(self, theta):
        theta = np.asarray(theta, dtype=float)
        adapted = [
            np.linalg.solve(self._shifted(i), self.Cs[i] @ self.mus[i] + self.lam * theta)
            for i in range(self.n_tasks)
        ]
        return np.concatenate(adapted)

    def _weights(self):
        # (C_i + lam I)^-1 C_i (C_i + lam I)^-1 without forming the inverse
        weights = []
        for i in range(self.n_tasks):
            left = np.linalg.solve(self._shifted(i), self.Cs[i])
            weights.append(np.linalg.solve(self._shifted(i), left.T).T)
        return weights

    def phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        total = 0.0
        for weight, mu in zip(self._weights(), self.mus):
            d = theta - mu
            total += 0.5 * self.lam ** 2 * d @ weight @ d
        return float(total)

    def optimum(self):
        weights = self._weights()
        lhs = sum(weights)
        rhs = sum(w @ mu for w, mu in zip(weights, self.mus))
        theta_star = np.linalg.solve(lhs, rhs)
        return theta_star, self.inner_solution(theta_star)

    def to_problem(self, params=None):
        n, p, lam = self.n_tasks, self.p, self.lam
        task_block = block_diag(*self.Cs)
        task_linear = -np.concatenate([c @ mu for c, mu in zip(self.Cs, self.mus)])
        task_constant = float(sum(0.5 * mu @ c @ mu for c, mu in zip(self.Cs, self.mus)))

        f_form = QuadraticForm(
            matrix=block_diag(np.zeros((p, p)), task_block),
            linear=np.concatenate([np.zeros(p), task_linear]),
            constant=task_constant,
            d1=p,
        )
        coupling = np.tile(-lam * np.eye(p), (1, n))
        g_matrix = np.block([
            [n * lam * np.eye(p), coupling],
            [coupling.T, task_block + lam * np.eye(n * p)],
        ])
        g_form = QuadraticForm(
            matrix=g_matrix,
            linear=np.concatenate([np.zeros(p), task_linear]),
            constant=task_constant,
            d1=p,
        )
        mu_g = min(float(np.linalg.eigvalsh(c)[0]) for c in self.Cs) + lam
        return quadratic_problem(
            "maml",
            f_form,
            g_form,
            mu_g=mu_g,
            known_optimum=self.optimum(),
            inner_solution=self.inner_solution,
            phi_closed_form=self.phi,
            params=params,
        )


def make_maml(N, p, seed, lam):
    """
    Seeded MAML instance: C_i with eigenvalues in [0.5, 2], mu_i entries in [-1, 1].

    Args:
        N (int): Number of tasks
        p (int): Parameter dimension
        seed (int): Seed
        lam (float): Coupling weight

    Returns:
        BilevelProblem: d1 = p, d2 = N * p
    """
    if N < 1 or p < 1:
        raise ConfigurationError(f"maml: need N >= 1 and p >= 1, got N={N}, p={p}")
    if not lam > 0:
        raise ConfigurationError(f"maml: coupling weight lam must be positive, got {lam}")
    rng = np.random.default_rng(seed)
    Cs = np.stack([random_spd(p, rng, 0.5, 2.0) for _ in range(N)])
    mus = rng.uniform(-1.0, 1.0, size=(N, p))
    return MAMLQuadratic(Cs=Cs, mus=mus, lam=float(lam)).to_problem(
        params={"tasks": N, "dim": p, "seed": seed, "lam": lam}
    )


# ===========================
# LANGEVIN TUNING TOY
# ===========================

@dataclass(frozen=True)
class LangevinTuningToy:
    """
    Inner V(z) = z'Pz/2 independent of theta; outer U(theta, z) = |theta - Mz - m|^2/2.

    Attributes:
        P (np.ndarray): n x n SPD
        M (np.ndarray): p x n
        m (np.ndarray): length p
    """

    P: np.ndarray
    M: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        if not is_spd(self.P):
            raise ConfigurationError("langevin_toy: P must be symmetric positive definite")

    def to_problem(self, params=None):
        n = self.P.shape[0]
        p = self.M.shape[0]
        lift = np.hstack([np.eye(p), -self.M])  # theta - Mz
        f_form = QuadraticForm(
            matrix=lift.T @ lift,
            linear=-lift.T @ self.m,
            constant=float(0.5 * self.m @ self.m),
            d1=p,
        )
        g_form = QuadraticForm(
            matrix=block_diag(np.zeros((p, p)), self.P),
            linear=np.zeros(p + n),
            constant=0.0,
            d1=p,
        )
        return quadratic_problem(
            "langevin_toy",
            f_form,
            g_form,
            mu_g=float(np.linalg.eigvalsh(self.P)[0]),
            known_optimum=(self.m.copy(), np.zeros(n)),
            inner_solution=lambda theta: np.zeros(n),
            phi_closed_form=lambda theta: float(0.5 * np.sum((np.asarray(theta) - self.m) ** 2)),
            params=params,
        )


def make_langevin_toy(P, M, m):
    """
    Decoupled tuning toy with optimum (theta*, z*) = (m, 0).

    Args:
        P: n x n SPD matrix of the inner objective
        M: p x n matrix of the affine target
        m: length-p offset of the affine target
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m = np.asarray(m, dtype=float).reshape(-1)
    M = _matrix(M, m.size, P.shape[0], "langevin_toy: M")
    return LangevinTuningToy(P=P, M=M, m=m).to_problem(
        params={"P": P.tolist(), "M": M.tolist(), "m": m.tolist()}
    )


# ===========================
# REGISTRY
# ===========================

def _build_quadratic1d(params):
    return make_quadratic_1d(broken_gradient=bool(params.pop("broken_gradient", False)))


def _build_quadratic(params):
    if "P_f" in params:
        d1 = len(params["P_f"])
        d2 = len(params["P_g"])
        instance = QuadraticBilevel(
            P_f=_matrix(params.pop("P_f"), d1, d1, "quadratic: P_f"),
            R_f=_matrix(params.pop("R_f"), d2, d2, "quadratic: R_f"),
            P_g=_matrix(params.pop("P_g"), d2, d2, "quadratic: P_g"),
            C=_matrix(params.pop("C"), d1, d2, "quadratic: C"),
            a=_vector(params.pop("a", np.zeros(d1)), d1, "quadratic: a"),
            b=_vector(params.pop("b", np.zeros(d2)), d2, "quadratic: b"),
            c0=_vector(params.pop("c0", np.zeros(d2)), d2, "quadratic: c0"),
        )
        return instance.to_problem(params={"explicit": True, "d1": d1, "d2": d2})
    return make_quadratic(
        int(params.pop("d1", 2)),
        int(params.pop("d2", 2)),
        int(params.pop("seed", 0)),
        coupling=float(params.pop("coupling", 1.0)),
        offsets=bool(params.pop("offsets", True)),
    )


def _build_maml(params):
    lam = float(params.pop("lam", 1.0))
    if "C" in params:
        Cs = np.asarray(params.pop("C"), dtype=float)
        if Cs.ndim == 1:
            Cs = Cs.reshape(-1, 1, 1)
        mus = np.asarray(params.pop("mu"), dtype=float).reshape(Cs.shape[0], Cs.shape[1])
        return MAMLQuadratic(Cs=Cs, mus=mus, lam=lam).to_problem(
            params={"tasks": int(Cs.shape[0]), "dim": int(Cs.shape[1]), "lam": lam, "explicit": True}
        )
    return make_maml(
        int(params.pop("tasks", 3)), int(params.pop("dim", 2)), int(params.pop("seed", 0)), lam
    )


def _build_langevin_toy(params):
    P = params.pop("P", np.eye(2))
    n = np.atleast_2d(np.asarray(P)).shape[0]
    m = params.pop("m", np.ones(2))
    M = params.pop("M", np.zeros((np.asarray(m).size, n)))
    return make_langevin_toy(P, M, m)


PROBLEM_BUILDERS = {
    "quadratic1d": _build_quadratic1d,
    "quadratic": _build_quadratic,
    "maml": _build_maml,
    "langevin_toy": _build_langevin_toy,
}


def available_problems():
    return sorted(PROBLEM_BUILDERS)


def make_problem(name, params=None):
    """
    Build a registered problem from its configuration block.

    Args:
        name (str): One of available_problems()
        params (dict): Parameter block; unknown keys are a configuration error

    Returns:
        BilevelProblem: the problem instance
    """
    if name not in PROBLEM_BUILDERS:
        raise ConfigurationError(
            f"unknown problem '{name}'; choose one of {', '.join(available_problems())}"
        )
    remaining = dict(params or {})
    try:
        problem = PROBLEM_BUILDERS[name](remaining)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"problem '{name}': invalid parameters ({exc})") from exc
    if remaining:
        raise ConfigurationError(
            f"problem '{name}': unknown parameter(s) {', '.join(sorted(remaining))}"
        )
    return problem
