"""
TTSA Bilevel Toolkit - SDE Engine Module
========================================

Euler-Maruyama simulation of the coupled two-timescale recursions

    dx = gamma1(t) [ -hypergrad(x, y) dt + bias1(t) dt + sigma1(t) dw1 ]
    dy = gamma2(t) [ -grad_y g(x, y) dt  + bias2(t) dt + sigma2(t) dw2 ]

with learning rates evaluated at the left end of each step.

Each trajectory owns one PCG64 stream derived from (seed, replicate index)
and consumes exactly one joint Gaussian block of size d1 + d2 per step, even
when every noise amplitude is zero. Blocks are drawn ahead in chunks; a
chunk of k blocks holds the same numbers as k single draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from ttsa import config
from ttsa.core.hypergradient import HypergradOperator
from ttsa.core.problem_model import SchedulePair, schedule_eval, validate_schedules
from ttsa.errors import AssumptionViolation, ConfigurationError, NumericalBlowupError

logger = logging.getLogger("Engine")

_PSD_TOL = 1e-12


def _square(value, dim, label):
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.shape != (dim, dim):
        raise ConfigurationError(f"{label} must be {dim} x {dim}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """
    Bias, diffusion and cross-correlation of the gradient observations.

    bias_i(t) = b_i (1 + t)^(-rho), sigma_i(t) = sigma_inf_i + D_i (1 + t)^(-kappa).
    The driving Gaussians (xi1, xi2) have identity marginal covariance and
    cross-covariance cross_corr.

    Attributes:
        bias_amp (tuple): (b1 of length d1, b2 of length d2)
        bias_rho (float): Bias decay exponent, >= 0
        diff_const (tuple): Limiting diffusions (d1 x d1, d2 x d2)
        cross_corr (np.ndarray): d1 x d2 correlation with entries in [-1, 1]
        diff_transient (tuple): Optional transient diffusions (D1, D2)
        kappa (float): Transient decay exponent, > 0
    """

    bias_amp: tuple
    bias_rho: float
    diff_const: tuple
    cross_corr: np.ndarray
    diff_transient: Optional[tuple] = None
    kappa: float = 1.0

    def __post_init__(self):
        b1 = np.asarray(self.bias_amp[0], dtype=float).reshape(-1)
        b2 = np.asarray(self.bias_amp[1], dtype=float).reshape(-1)
        d1, d2 = b1.size, b2.size
        s1 = _square(self.diff_const[0], d1, "noise.diff_const[0]")
        s2 = _square(self.diff_const[1], d2, "noise.diff_const[1]")
        rho_c = np.asarray(self.cross_corr, dtype=float)
        if rho_c.size != d1 * d2:
            raise ConfigurationError(f"noise.cross_corr must be {d1} x {d2}")
        rho_c = rho_c.reshape(d1, d2)
        if not np.all(np.isfinite(rho_c)) or np.any(np.abs(rho_c) > 1.0):
            raise ConfigurationError("noise.cross_corr entries must lie in [-1, 1]")
        if not (np.isfinite(self.bias_rho) and self.bias_rho >= 0):
            raise ConfigurationError(f"noise.bias_rho must be non-negative, got {self.bias_rho}")
        if not (np.all(np.isfinite(b1)) and np.all(np.isfinite(b2))):
            raise ConfigurationError("noise.bias_amp must be finite")

        transient = None
        if self.diff_transient is not None:
            if not (np.isfinite(self.kappa) and self.kappa > 0):
                raise ConfigurationError(f"noise.kappa must be positive, got {self.kappa}")
            transient = (
                _square(self.diff_transient[0], d1, "noise.diff_transient[0]"),
                _square(self.diff_transient[1], d2, "noise.diff_transient[1]"),
            )

        object.__setattr__(self, "bias_amp", (b1, b2))
        object.__setattr__(self, "diff_const", (s1, s2))
        object.__setattr__(self, "cross_corr", rho_c)
        object.__setattr__(self, "diff_transient", transient)

        eigenvalues = np.linalg.eigvalsh(self.correlation)
        if eigenvalues[0] < -_PSD_TOL * max(1.0, eigenvalues[-1]):
            raise ConfigurationError(
                "noise.cross_corr does not define a positive semi-definite joint correlation "
                f"(smallest eigenvalue {eigenvalues[0]:.3e})"
            )

    @classmethod
    def zero(cls, d1, d2):
        """No bias and no diffusion."""
        return cls(
            bias_amp=(np.zeros(d1), np.zeros(d2)),
            bias_rho=0.0,
            diff_const=(np.zeros((d1, d1)), np.zeros((d2, d2))),
            cross_corr=np.zeros((d1, d2)),
        )

    @classmethod
    def isotropic(cls, d1, d2, sigma1=1.0, sigma2=1.0, cross=0.0):
        """
        sigma_inf_i = sigma_i * I, no bias.

        A scalar cross value is placed on the leading diagonal of cross_corr.
        """
        rho_c = np.zeros((d1, d2))
        k = min(d1, d2)
        rho_c[np.arange(k), np.arange(k)] = cross
        return cls(
            bias_amp=(np.zeros(d1), np.zeros(d2)),
            bias_rho=0.0,
            diff_const=(sigma1 * np.eye(d1), sigma2 * np.eye(d2)),
            cross_corr=rho_c,
        )

    @property
    def d1(self):
        return self.bias_amp[0].size

    @property
    def d2(self):
        return self.bias_amp[1].size

    @property
    def has_bias(self):
        return bool(np.any(self.bias_amp[0] != 0) or np.any(self.bias_amp[1] != 0))

    @property
    def correlation(self):
        """Joint correlation [[I, rho_c], [rho_c^T, I]] of (xi1, xi2)."""
        return np.block([
            [np.eye(self.d1), self.cross_corr],
            [self.cross_corr.T, np.eye(self.d2)],
        ])

    @cached_property
    def correlation_factor(self):
        """
        L with L L^T equal to the joint correlation.

        Lower-triangular Cholesky factor when the correlation is definite, so
        xi2 is a shared part of xi1 plus an independent remainder; a symmetric
        eigen square root when it is only semi-definite (|cross_corr| = 1).
        """
        corr = self.correlation
        try:
            return np.linalg.cholesky(corr)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(corr)
            return v * np.sqrt(np.clip(w, 0.0, None))

    def sigma(self, t):
        """Return (sigma1(t), sigma2(t))."""
        s1, s2 = self.diff_const
        if self.diff_transient is None:
            return s1, s2
        decay = (1.0 + t) ** (-self.kappa)
        return s1 + decay * self.diff_transient[0], s2 + decay * self.diff_transient[1]

    def bias(self, t):
        """Return (bias1(t), bias2(t))."""
        decay = (1.0 + t) ** (-self.bias_rho)
        return decay * self.bias_amp[0], decay * self.bias_amp[1]

    def limits(self):
        """
        Limiting noise covariances (G11, G22, G12).

        G11 = s1 s1^T, G22 = s2 s2^T and G12 = s1 rho_c s2^T; G21 is G12^T.
        """
        s1, s2 = self.diff_const
        return s1 @ s1.T, s2 @ s2.T, s1 @ self.cross_corr @ s2.T

    def check_bias_decay(self, schedules):
        """Reject a nonzero bias that decays no faster than sqrt(gamma1)."""
        if self.has_bias and not self.bias_rho > schedules.outer.eta / 2.0:
            raise AssumptionViolation(
                "Assumption 6 (bias decay)",
                f"bias decay exponent rho={self.bias_rho} must exceed eta1/2={schedules.outer.eta / 2.0} "
                "when the bias amplitude is nonzero",
            )

    def check_dims(self, prob):
        if (self.d1, self.d2) != (prob.d1, prob.d2):
            raise ConfigurationError(
                f"noise dimensions ({self.d1}, {self.d2}) do not match problem '{prob.name}' "
                f"({prob.d1}, {prob.d2})"
            )

    def as_dict(self):
        return {
            "bias_amp": [b.tolist() for b in self.bias_amp],
            "bias_rho": self.bias_rho,
            "diff_const": [s.tolist() for s in self.diff_const],
            "diff_transient": None if self.diff_transient is None else [d.tolist() for d in self.diff_transient],
            "kappa": self.kappa,
            "cross_corr": self.cross_corr.tolist(),
        }


@dataclass(frozen=True, eq=False)
class TTSAConfig:
    """
    Discretization and run settings of one trajectory.

    Attributes:
        dt (float): Time step
        T (float): Horizon
        schedules (SchedulePair): Learning rates
        x0 (np.ndarray): Initial outer state
        y0 (np.ndarray): Initial inner state
        seed (int): Base seed, 0 <= seed < 2^64
        log_stride (int): Record every log_stride steps
        blowup_bound (float): Stop once ||x|| + ||y|| exceeds it
        outer_gradient (str): "hypergradient" or "partial"
    """

    dt: float
    T: float
    schedules: SchedulePair
    x0: np.ndarray
    y0: np.ndarray
    seed: int = config.DEFAULT_SEED
    log_stride: int = config.DEFAULT_LOG_STRIDE
    blowup_bound: float = config.DEFAULT_BLOWUP_BOUND
    outer_gradient: str = config.OUTER_GRADIENT_HYPERGRAD

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "y0", np.asarray(self.y0, dtype=float).reshape(-1))

    @property
    def n_steps(self):
        return max(1, int(round(self.T / self.dt)))

    def validate(self, prob=None):
        """Raise ConfigurationError on any malformed setting."""
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ConfigurationError(f"engine.dt must be positive, got {self.dt}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ConfigurationError(f"engine.T must be positive, got {self.T}")
        if self.dt > self.T:
            raise ConfigurationError(f"engine.dt={self.dt} exceeds the horizon T={self.T}")
        if int(self.log_stride) < 1:
            raise ConfigurationError(f"engine.log_stride must be at least 1, got {self.log_stride}")
        if not self.blowup_bound > 0:
            raise ConfigurationError(f"engine.blowup_bound must be positive, got {self.blowup_bound}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError(f"engine.seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.outer_gradient not in config.OUTER_GRADIENT_MODES:
            raise ConfigurationError(
                f"engine.outer_gradient must be one of {config.OUTER_GRADIENT_MODES}, got '{self.outer_gradient}'"
            )
        if not (np.all(np.isfinite(self.x0)) and np.all(np.isfinite(self.y0))):
            raise ConfigurationError("initial state must be finite")
        if prob is not None and (self.x0.size, self.y0.size) != (prob.d1, prob.d2):
            raise ConfigurationError(
                f"initial state dimensions ({self.x0.size}, {self.y0.size}) do not match problem "
                f"'{prob.name}' ({prob.d1}, {prob.d2})"
            )

    def with_overrides(self, **changes):
        return replace(self, **changes)


@dataclass
class Trajectory:
    """
    Logged path of one run.

    Attributes:
        times (np.ndarray): Logged times, spacing dt * log_stride from 0
        xs (np.ndarray): (n, d1) outer states
        ys (np.ndarray): (n, d2) inner states
        gamma1, gamma2 (np.ndarray): Learning rates at the logged times
        terminated_early (bool): Blow-up guard fired
        reason (str): Why the run stopped early
        final_time (float): Time of the last state reached
        final_x, final_y (np.ndarray): Last state reached
    """

    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    terminated_early: bool = False
    reason: Optional[str] = None
    final_time: float = 0.0
    final_x: np.ndarray = field(default=None)
    final_y: np.ndarray = field(default=None)

    def __len__(self):
        return self.times.size


@dataclass
class BatchOutcome:
    """
    Result of integrating a block of replicates.

    Attributes:
        indices (np.ndarray): Replicate indices, one stream each
        final_x (np.ndarray): (R, d1) states at T, or at the blow-up step
        final_y (np.ndarray): (R, d2)
        blowup_step (np.ndarray): Step at which the guard fired, -1 if never
        reasons (list): Blow-up reason per replicate (None when finite)
        record_steps (np.ndarray): Steps at which states were recorded
        record_x (np.ndarray): (n_rec, R, d1)
        record_y (np.ndarray): (n_rec, R, d2)
    """

    indices: np.ndarray
    final_x: np.ndarray
    final_y: np.ndarray
    blowup_step: np.ndarray
    reasons: list
    record_steps: np.ndarray
    record_x: np.ndarray
    record_y: np.ndarray

    @property
    def blown(self):
        return self.blowup_step >= 0


def make_stream(seed, index=0):
    """Generator for replicate `index` of base seed `seed`."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def _noise_terms(noise, t, dt, xi):
    """Bias and diffusion parts of both increments for Gaussian blocks xi (..., d1 + d2)."""
    d1 = noise.d1
    correlated = xi @ noise.correlation_factor.T
    s1, s2 = noise.sigma(t)
    b1, b2 = noise.bias(t)
    root_dt = np.sqrt(dt)
    noise1 = b1 * dt + (correlated[..., :d1] @ s1.T) * root_dt
    noise2 = b2 * dt + (correlated[..., d1:] @ s2.T) * root_dt
    return noise1, noise2


def _increment(operator, noise, x, y, t, dt, xi):
    noise1, noise2 = _noise_terms(noise, t, dt, xi)
    dh1 = -operator.outer(x, y) * dt + noise1
    dh2 = -operator.inner(x, y) * dt + noise2
    return dh1, dh2


def observation_increment(prob, noise, state, t, dt, rng, outer_gradient=config.OUTER_GRADIENT_HYPERGRAD):
    """
    Bracketed increments of both recursions before scaling by the learning rates.

    Args:
        prob (BilevelProblem): Problem
        noise (NoiseModel): Observation noise
        state (tuple): (x, y)
        t (float): Left end of the step
        dt (float): Step length
        rng (np.random.Generator): Stream; one (d1 + d2) Gaussian block is consumed
        outer_gradient (str): Outer drift mode

    Returns:
        tuple: (dh1, dh2)
    """
    x = np.asarray(state[0], dtype=float).reshape(prob.d1)
    y = np.asarray(state[1], dtype=float).reshape(prob.d2)
    xi = rng.standard_normal(prob.d1 + prob.d2)
    return _increment(HypergradOperator(prob, outer_gradient), noise, x, y, t, dt, xi)


def em_step(state, t, dt, prob, noise, schedules, rng, outer_gradient=config.OUTER_GRADIENT_HYPERGRAD):
    """
    One Euler-Maruyama step, (x, y) + (gamma1(t) dh1, gamma2(t) dh2).

    Returns:
        tuple: (x', y')
    """
    dh1, dh2 = observation_increment(prob, noise, state, t, dt, rng, outer_gradient)
    gamma1, gamma2 = schedules.rates(t)
    x_new = np.asarray(state[0], dtype=float).reshape(prob.d1) + gamma1 * dh1
    y_new = np.asarray(state[1], dtype=float).reshape(prob.d2) + gamma2 * dh2
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
        raise NumericalBlowupError(f"non-finite state after the step at t={t}")
    return x_new, y_new


def check_run(cfg, prob, noise):
    """Every gate that must pass before a single step is taken."""
    cfg.validate(prob)
    noise.check_dims(prob)
    validate_schedules(cfg.schedules).raise_if_rejected()
    noise.check_bias_decay(cfg.schedules)


class _NoiseBuffer:
    """Per-replicate Gaussian blocks and learning rates, refilled a chunk at a time."""

    def __init__(self, streams, dim, cfg):
        self.streams = streams
        self.dim = dim
        self.cfg = cfg
        self.start = 0
        self.size = 0
        self.blocks = None
        self.gamma1 = None
        self.gamma2 = None

    def refill(self, step):
        size = min(config.NOISE_CHUNK_STEPS, self.cfg.n_steps - step)
        self.blocks = np.stack([rng.standard_normal((size, self.dim)) for rng in self.streams], axis=1)
        times = (step + np.arange(size)) * self.cfg.dt
        self.gamma1 = schedule_eval(self.cfg.schedules.outer, times)
        self.gamma2 = schedule_eval(self.cfg.schedules.inner, times)
        self.start = step
        self.size = size

    def at(self, step):
        if step >= self.start + self.size or self.blocks is None:
            self.refill(step)
        k = step - self.start
        return self.blocks[k], self.gamma1[k], self.gamma2[k]


def integrate_batch(cfg, prob, noise, indices, record_steps=()):
    """
    Integrate one replicate per index, all sharing cfg except the stream.

    Replicates that hit the blow-up guard are frozen at their last state and
    keep consuming their stream so the others are unaffected.

    Args:
        cfg (TTSAConfig): Run settings
        prob (BilevelProblem): Problem
        noise (NoiseModel): Observation noise
        indices (sequence): Replicate indices
        record_steps (sequence): Steps (0..n_steps) at which to record states

    Returns:
        BatchOutcome: final states, blow-up bookkeeping and recordings
    """
    check_run(cfg, prob, noise)
    indices = np.asarray(list(indices), dtype=np.int64)
    n_rep = indices.size
    n_steps = cfg.n_steps
    dt = cfg.dt
    operator = HypergradOperator(prob, cfg.outer_gradient)
    buffer = _NoiseBuffer([make_stream(cfg.seed, i) for i in indices], prob.d1 + prob.d2, cfg)

    x = np.tile(cfg.x0, (n_rep, 1))
    y = np.tile(cfg.y0, (n_rep, 1))
    blowup_step = np.full(n_rep, -1, dtype=np.int64)
    reasons = [None] * n_rep
    active = np.ones(n_rep, dtype=bool)

    record_steps = np.asarray(sorted(set(int(s) for s in record_steps)), dtype=np.int64)
    record_x = np.empty((record_steps.size, n_rep, prob.d1))
    record_y = np.empty((record_steps.size, n_rep, prob.d2))
    cursor = 0

    def guard(step):
        norms = np.linalg.norm(x, axis=1) + np.linalg.norm(y, axis=1)
        hit = active & ~(norms <= cfg.blowup_bound)
        for r in np.flatnonzero(hit):
            finite = np.isfinite(norms[r])
            reasons[r] = (
                f"||x|| + ||y|| = {norms[r]:.6e} exceeds blowup_bound {cfg.blowup_bound:g} at step {step}"
                if finite else f"non-finite state at step {step}"
            )
            blowup_step[r] = step
            logger.debug("Replicate %d blew up: %s", indices[r], reasons[r])
        active[hit] = False

    def record(step):
        nonlocal cursor
        while cursor < record_steps.size and record_steps[cursor] == step:
            record_x[cursor] = x
            record_y[cursor] = y
            cursor += 1

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n_steps):
            record(step)
            guard(step)
            xi, gamma1, gamma2 = buffer.at(step)
            if not active.any():
                continue
            t = step * dt
            if active.all():
                dh1, dh2 = _increment(operator, noise, x, y, t, dt, xi)
                x += gamma1 * dh1
                y += gamma2 * dh2
            else:
                rows = np.flatnonzero(active)
                dh1, dh2 = _increment(operator, noise, x[rows], y[rows], t, dt, xi[rows])
                x[rows] += gamma1 * dh1
                y[rows] += gamma2 * dh2
        guard(n_steps)
        record(n_steps)

    return BatchOutcome(
        indices=indices,
        final_x=x,
        final_y=y,
        blowup_step=blowup_step,
        reasons=reasons,
        record_steps=record_steps,
        record_x=record_x,
        record_y=record_y,
    )


def integrate(cfg, prob, noise):
    """
    Simulate one trajectory (replicate 0 of cfg.seed) from t = 0 to T.

    States are logged every log_stride steps. When ||x|| + ||y|| exceeds the
    blow-up bound the run stops there and the trajectory is marked
    terminated_early; logged points end at the last stride before the stop.

    Args:
        cfg (TTSAConfig): Run settings
        prob (BilevelProblem): Problem
        noise (NoiseModel): Observation noise

    Returns:
        Trajectory: logged path and final state
    """
    check_run(cfg, prob, noise)
    stride = int(cfg.log_stride)
    steps = np.arange(0, cfg.n_steps + 1, stride)
    logger.info(
        "Integrating '%s': %d steps of dt=%g, logging every %d", prob.name, cfg.n_steps, cfg.dt, stride
    )
    outcome = integrate_batch(cfg, prob, noise, [0], record_steps=steps)

    stop = int(outcome.blowup_step[0])
    if stop >= 0:
        steps_kept = steps[steps <= stop]
        logger.warning("Run stopped early: %s", outcome.reasons[0])
    else:
        steps_kept = steps
    n = steps_kept.size
    times = steps_kept * cfg.dt
    return Trajectory(
        times=times,
        xs=outcome.record_x[:n, 0, :].copy(),
        ys=outcome.record_y[:n, 0, :].copy(),
        gamma1=np.atleast_1d(schedule_eval(cfg.schedules.outer, times)),
        gamma2=np.atleast_1d(schedule_eval(cfg.schedules.inner, times)),
        terminated_early=stop >= 0,
        reason=outcome.reasons[0],
        final_time=(stop if stop >= 0 else cfg.n_steps) * cfg.dt,
        final_x=outcome.final_x[0].copy(),
        final_y=outcome.final_y[0].copy(),
    )
