"""
TTSA Bilevel Toolkit - Run Configuration Module
===============================================

Schema and loader of the JSON run configuration:

    {
      "problem":   {"name": "quadratic1d", "params": {}},
      "schedules": {"outer": {"gamma0": 1, "delta": 1, "eta": 0.9},
                    "inner": {"gamma0": 1, "delta": 1, "eta": 0.6}},
      "noise":     {"diff_const": 1.0, "cross_corr": 0.0},
      "engine":    {"dt": 0.01, "T": 10000, "seed": 0, "x0": [1], "y0": [1]},
      "mc":        {"replicates": 1000},
      "output":    {"dir": "out"}
    }

Matrices may be given as nested lists or as a scalar, which means that
multiple of the identity (diff_const, diff_transient) or that value on the
leading diagonal (cross_corr). Every validation error names the field path
of the offending entry; JSON syntax errors name line and column.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ttsa import config
from ttsa.core.mc_verifier import MCConfig
from ttsa.core.problem_model import LearningRateSchedule, SchedulePair, as_vector, validate_schedules
from ttsa.core.problems import make_problem
from ttsa.core.sde_engine import NoiseModel, TTSAConfig
from ttsa.errors import ArgumentError, ConfigurationError

logger = logging.getLogger("Config")

Matrix = Union[float, List[List[float]]]
Vector = Union[float, List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSection(_Strict):
    name: str = Field(..., description="Registered problem name.")
    params: dict = Field(default_factory=dict, description="Problem parameter block.")


class ScheduleSection(_Strict):
    gamma0: float = Field(1.0, gt=0.0)
    delta: float = Field(1.0, gt=0.0)
    eta: float = Field(..., description="Decay exponent, in (1/2, 1).")


class SchedulesSection(_Strict):
    outer: ScheduleSection
    inner: ScheduleSection


class NoiseSection(_Strict):
    bias_amp: Optional[Tuple[Vector, Vector]] = None
    bias_rho: float = Field(0.0, ge=0.0)
    diff_const: Union[float, Tuple[Matrix, Matrix]] = 0.0
    diff_transient: Optional[Union[float, Tuple[Matrix, Matrix]]] = None
    kappa: float = Field(1.0, gt=0.0)
    cross_corr: Matrix = 0.0


class EngineSection(_Strict):
    dt: float = Field(..., gt=0.0)
    T: float = Field(..., gt=0.0)
    seed: int = Field(config.DEFAULT_SEED, ge=0, lt=2 ** 64)
    log_stride: int = Field(config.DEFAULT_LOG_STRIDE, ge=1)
    blowup_bound: float = Field(config.DEFAULT_BLOWUP_BOUND, gt=0.0)
    outer_gradient: Literal["hypergradient", "partial"] = config.OUTER_GRADIENT_HYPERGRAD
    x0: Optional[Vector] = None
    y0: Optional[Vector] = None


class MCSection(_Strict):
    replicates: int = Field(..., description="Number of replicates, at least 2.")
    workers: Optional[int] = Field(None, ge=1)
    cov_rel_tol: float = Field(config.COV_REL_TOL, gt=0.0)
    cross_block_tol: float = Field(config.CROSS_BLOCK_TOL, gt=0.0)
    ks_pvalue_min: float = Field(config.KS_PVALUE_MIN, ge=0.0, le=1.0)
    bias_sigmas: float = Field(config.BIAS_SIGMAS, gt=0.0)
    blowup_fraction_max: float = Field(config.BLOWUP_FRACTION_MAX, ge=0.0, le=1.0)
    checkpoint_fractions: List[float] = Field(default_factory=lambda: list(config.CHECKPOINT_FRACTIONS))
    required_checks: List[str] = Field(default_factory=lambda: list(config.MC_CHECKS))


class CheckGradSection(_Strict):
    points: int = Field(config.CHECK_GRAD_POINTS, ge=1)
    seed: int = Field(config.CHECK_GRAD_SEED, ge=0)
    radius: float = Field(config.CHECK_GRAD_RADIUS, gt=0.0)
    tol: float = Field(config.CHECK_GRAD_TOL, gt=0.0)


class TelemetrySection(_Strict):
    enabled: bool = False
    host: str = config.MQTT_BROKER_HOST
    port: int = Field(config.MQTT_BROKER_PORT, ge=1, le=65535)
    client_id: str = config.MQTT_CLIENT_ID
    topic_prefix: str = config.MQTT_TOPIC_PREFIX
    qos: int = Field(config.MQTT_QOS, ge=0, le=2)


class OutputSection(_Strict):
    dir: str = config.DEFAULT_OUTPUT_DIR


class RunConfig(_Strict):
    """Whole run configuration document."""

    problem: ProblemSection
    schedules: SchedulesSection
    noise: NoiseSection = Field(default_factory=NoiseSection)
    engine: EngineSection
    mc: Optional[MCSection] = None
    check_grad: CheckGradSection = Field(default_factory=CheckGradSection)
    telemetry: TelemetrySection = Field(default_factory=TelemetrySection)
    output: OutputSection = Field(default_factory=OutputSection)


def _format_validation_error(source, exc):
    lines = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return f"{source}: invalid configuration\n  " + "\n  ".join(lines)


def parse_run_config(text, source="<config>"):
    """
    Parse and schema-check a configuration document.

    Args:
        text (str): JSON text
        source (str): Name used in error messages

    Returns:
        RunConfig: validated document
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation_error(source, exc)) from None


def load_run_config(path):
    """Read a configuration file; unreadable files are configuration errors."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration '{path}': {exc.strerror or exc}") from None
    logger.info("Loaded configuration %s", path)
    return parse_run_config(text, source=str(path))


def apply_overrides(run, seed=None, replicates=None, out=None):
    """Return a copy with CLI overrides applied."""
    update = {}
    if seed is not None:
        update["engine"] = run.engine.model_copy(update={"seed": int(seed)})
    if replicates is not None:
        if run.mc is None:
            update["mc"] = MCSection(replicates=int(replicates))
        else:
            update["mc"] = run.mc.model_copy(update={"replicates": int(replicates)})
    if out is not None:
        update["output"] = run.output.model_copy(update={"dir": str(out)})
    if not update:
        return run
    try:
        return RunConfig.model_validate({**run.model_dump(), **{k: v.model_dump() for k, v in update.items()}})
    except ValidationError as exc:
        raise ConfigurationError(_format_validation_error("command line", exc)) from None


# ===========================
# DOMAIN OBJECTS
# ===========================

def _matrix(value, dim, label):
    if isinstance(value, (int, float)):
        return float(value) * np.eye(dim)
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2 or arr.shape != (dim, dim):
        raise ConfigurationError(f"{label} must be a scalar or a {dim} x {dim} matrix, got shape {arr.shape}")
    return arr


def _cross(value, d1, d2):
    if isinstance(value, (int, float)):
        m = np.zeros((d1, d2))
        k = min(d1, d2)
        m[np.arange(k), np.arange(k)] = float(value)
        return m
    arr = np.asarray(value, dtype=float)
    if arr.shape != (d1, d2):
        raise ConfigurationError(f"noise.cross_corr must be a scalar or a {d1} x {d2} matrix, got shape {arr.shape}")
    return arr


def _pair(value, d1, d2, label):
    if isinstance(value, (int, float)):
        return _matrix(value, d1, f"{label}[0]"), _matrix(value, d2, f"{label}[1]")
    return _matrix(value[0], d1, f"{label}[0]"), _matrix(value[1], d2, f"{label}[1]")


def _state(value, dim, label):
    if value is None:
        return np.zeros(dim)
    if isinstance(value, (int, float)):
        return np.full(dim, float(value))
    try:
        return as_vector(value, dim)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{label}: {exc}") from None


def build_noise(section, d1, d2):
    if section.bias_amp is None:
        bias = (np.zeros(d1), np.zeros(d2))
    else:
        bias = (_state(section.bias_amp[0], d1, "noise.bias_amp[0]"), _state(section.bias_amp[1], d2, "noise.bias_amp[1]"))
    return NoiseModel(
        bias_amp=bias,
        bias_rho=section.bias_rho,
        diff_const=_pair(section.diff_const, d1, d2, "noise.diff_const"),
        cross_corr=_cross(section.cross_corr, d1, d2),
        diff_transient=None if section.diff_transient is None
        else _pair(section.diff_transient, d1, d2, "noise.diff_transient"),
        kappa=section.kappa,
    )


def build_schedules(section):
    try:
        return SchedulePair(
            outer=LearningRateSchedule(section.outer.gamma0, section.outer.delta, section.outer.eta),
            inner=LearningRateSchedule(section.inner.gamma0, section.inner.delta, section.inner.eta),
        )
    except ArgumentError as exc:
        raise ConfigurationError(f"schedules: {exc}") from None


@dataclass(eq=False)
class RunSetup:
    """
    Domain objects built from a RunConfig.

    Attributes:
        run (RunConfig): Source document (with overrides)
        problem (BilevelProblem): Problem instance
        schedules (SchedulePair): Learning rates
        noise (NoiseModel): Observation noise
        engine (TTSAConfig): Trajectory settings
        mc (MCConfig): Monte Carlo settings, None without an mc section
    """

    run: RunConfig
    problem: object
    schedules: SchedulePair
    noise: NoiseModel
    engine: TTSAConfig
    mc: Optional[MCConfig]

    @property
    def output_dir(self):
        return Path(self.run.output.dir)

    def resolved(self):
        """JSON-ready resolved configuration for manifests."""
        return self.run.model_dump(mode="json")


def build_setup(run):
    """
    Build every domain object and re-run every load-time validation.

    Raises:
        ConfigurationError: any invalid setting; AssumptionViolation names the assumption
    """
    problem = make_problem(run.problem.name, run.problem.params)
    schedules = build_schedules(run.schedules)
    validate_schedules(schedules).raise_if_rejected()

    noise = build_noise(run.noise, problem.d1, problem.d2)
    noise.check_bias_decay(schedules)

    e = run.engine
    engine = TTSAConfig(
        dt=e.dt,
        T=e.T,
        schedules=schedules,
        x0=_state(e.x0, problem.d1, "engine.x0"),
        y0=_state(e.y0, problem.d2, "engine.y0"),
        seed=e.seed,
        log_stride=e.log_stride,
        blowup_bound=e.blowup_bound,
        outer_gradient=e.outer_gradient,
    )
    engine.validate(problem)

    mc = None
    if run.mc is not None:
        m = run.mc
        mc = MCConfig(
            replicates=m.replicates,
            engine=engine,
            workers=m.workers,
            cov_rel_tol=m.cov_rel_tol,
            cross_block_tol=m.cross_block_tol,
            ks_pvalue_min=m.ks_pvalue_min,
            bias_sigmas=m.bias_sigmas,
            blowup_fraction_max=m.blowup_fraction_max,
            checkpoint_fractions=tuple(m.checkpoint_fractions),
            required_checks=tuple(m.required_checks),
        )
        mc.validate()

    return RunSetup(run=run, problem=problem, schedules=schedules, noise=noise, engine=engine, mc=mc)
