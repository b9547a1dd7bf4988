"""
Exception hierarchy.

Every error raised on purpose by the toolkit derives from TTSAError and carries
the CLI exit code it maps to, so main.py can translate failures without
inspecting messages.
"""

from contextlib import contextmanager

from ttsa import config


class TTSAError(Exception):
    """Base class for toolkit errors."""

    exit_code = config.EXIT_MATH


class ConfigurationError(TTSAError):
    """Invalid run configuration (file schema, dimensions, settings)."""

    exit_code = config.EXIT_CONFIG


class AssumptionViolation(ConfigurationError):
    """
    A configuration breaks one of the standing assumptions of the method.

    Attributes:
        assumption (str): Name of the violated assumption, e.g. "Assumption 1 (learning-rate schedule)"
    """

    def __init__(self, assumption, message):
        super().__init__(f"{assumption} violated: {message}")
        self.assumption = assumption


class ArgumentError(TTSAError, ValueError):
    """A precondition on a function argument does not hold."""

    exit_code = config.EXIT_CONFIG


class MathError(TTSAError):
    """Numerical or mathematical failure."""

    exit_code = config.EXIT_MATH


class SingularityError(MathError):
    """A matrix that must be invertible (or positive definite) is not."""


class StabilityError(MathError):
    """A matrix that must be Hurwitz is not."""


class NumericalError(MathError):
    """Eigen-solver failure, overflow and similar floating-point trouble."""


class NumericalBlowupError(NumericalError):
    """The state became non-finite during an update."""


class AccuracyError(MathError):
    """A quadrature or approximation cannot reach its accuracy contract."""


class NonConvergenceError(MathError):
    """
    An iterative solver ran out of iterations.

    Attributes:
        residual (float): Residual norm at the last iterate
    """

    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class ExperimentInvalidError(TTSAError):
    """Too many Monte Carlo replicates blew up for the statistics to mean anything."""

    exit_code = config.EXIT_INVALID_EXPERIMENT


@contextmanager
def stage(name):
    """Prefix any toolkit error raised inside the block with the pipeline stage."""
    try:
        yield
    except TTSAError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
            head = f"{name}: {exc.args[0]}" if exc.args else name
            exc.args = (head,) + exc.args[1:]
        raise
