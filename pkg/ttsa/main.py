"""
================================================================================
TTSA BILEVEL TOOLKIT - COMMAND LINE
================================================================================

Continuous-time two-timescale stochastic approximation for stochastic bilevel
optimisation, with a central-limit predictor and a Monte Carlo harness.

COMMANDS:
=========
    predict     linearize at the optimum, solve the Lyapunov equations
                -> predict.json
    run         integrate one trajectory
                -> trajectory.csv, manifest.json
    mc          replicate trajectories and compare with the prediction
                -> mc_report.json, summary.txt, manifest.json
    check-grad  audit hypergradient and hyper-Hessian against finite differences
                -> check.json
    validate    re-run every configuration check, write nothing

USAGE:
======
    python -m ttsa <command> --config <path> [--out <dir>] [--seed <u64>] [--replicates <n>]

EXIT CODES:
===========
    0 success, 2 configuration, 3 math, 4 blow-up, 5 invalid experiment

ENVIRONMENT:
============
    TTSA_THREADS    caps the Monte Carlo worker count
    TTSA_LOG_LEVEL  log level (DEBUG, INFO, WARNING, ...)
"""

import argparse
import logging
import os
import sys

import numpy as np

from ttsa import __version__, config
from ttsa.core.clt_predictor import predict
from ttsa.core.hypergradient import audit_hypergradient, find_optimum
from ttsa.core.mc_verifier import verify_clt
from ttsa.core.problem_model import check_assumptions, sample_points_around
from ttsa.core.sde_engine import integrate
from ttsa.errors import ConfigurationError, ExperimentInvalidError, TTSAError, stage
from ttsa.reporting import writers
from ttsa.reporting.telemetry import make_publisher
from ttsa.run_config import apply_overrides, build_setup, load_run_config

logger = logging.getLogger("Main")

COMMANDS = ("predict", "run", "mc", "check-grad", "validate")


def setup_logging(level=None):
    """Configure the root handler once; TTSA_LOG_LEVEL overrides the default."""
    level = (level or os.environ.get(config.LOG_LEVEL_ENV_VAR) or config.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(level), int):
        level = config.LOG_LEVEL
    logging.basicConfig(level=level, format=config.LOG_FORMAT, force=True)


def _u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {value}")
    return value


def _positive(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=_u64, default=None, help="base seed override")
    common.add_argument("--replicates", type=_positive, default=None, help="Monte Carlo replicate override")

    parser = argparse.ArgumentParser(
        prog="ttsa",
        description="Two-timescale stochastic approximation for bilevel optimisation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("predict", parents=[common], help="predict the limit covariances")
    sub.add_parser("run", parents=[common], help="integrate one trajectory")
    sub.add_parser("mc", parents=[common], help="Monte Carlo verification of the prediction")
    sub.add_parser("check-grad", parents=[common], help="audit the hypergradient")
    sub.add_parser("validate", parents=[common], help="validate a configuration")
    return parser


def load_setup(args):
    run = load_run_config(args.config)
    run = apply_overrides(run, seed=args.seed, replicates=args.replicates, out=args.out)
    return build_setup(run)


def _center(prob):
    if prob.known_optimum is not None:
        return prob.known_optimum
    return np.zeros(prob.d1), np.zeros(prob.d2)


# ===========================
# COMMANDS
# ===========================

def cmd_predict(setup):
    """Serialize the CLT prediction at the problem's optimum."""
    prob = setup.problem
    with stage("optimum"):
        x_star, y_star = find_optimum(prob)
    prediction = predict(prob, setup.noise, x_star, y_star, cross_check=True)

    out = writers.ensure_output_dir(setup.output_dir)
    writers.write_json(out / config.PREDICT_FILE, {"problem": prob.name, **prediction.as_dict()})
    return config.EXIT_OK


def cmd_run(setup):
    """Integrate one trajectory; exit 4 when the blow-up guard stopped it."""
    out = writers.ensure_output_dir(setup.output_dir)
    traj = integrate(setup.engine, setup.problem, setup.noise)

    csv_hash = writers.write_trajectory(out / config.TRAJECTORY_FILE, traj)
    writers.write_manifest(
        out / config.MANIFEST_FILE,
        setup.resolved(),
        setup.engine.seed,
        {config.TRAJECTORY_FILE: csv_hash},
        extra={
            "terminated_early": traj.terminated_early,
            "reason": traj.reason,
            "final_time": traj.final_time,
        },
    )
    if traj.terminated_early:
        logger.warning("Trajectory terminated early: %s", traj.reason)
        return config.EXIT_BLOWUP
    return config.EXIT_OK


def cmd_mc(setup):
    """
    Monte Carlo verification.

    Exceeded tolerances are a result (pass=false, exit 0); only an invalid
    experiment changes the exit code.
    """
    if setup.mc is None:
        raise ConfigurationError("the mc command needs an 'mc' section or --replicates")
    out = writers.ensure_output_dir(setup.output_dir)

    publisher = make_publisher(setup.run.telemetry)
    publisher.connect()
    publisher.publish_status("running", problem=setup.problem.name, replicates=setup.mc.replicates)
    try:
        report = verify_clt(setup.mc, setup.problem, setup.noise, progress=publisher.publish_progress)
        publisher.publish_result(report)
    except ExperimentInvalidError as exc:
        publisher.publish_status("invalid", reason=str(exc))
        raise
    finally:
        publisher.disconnect()

    report_hash = writers.write_json(out / config.MC_REPORT_FILE, {"problem": setup.problem.name, **report.as_dict()})
    summary_hash = writers.write_summary(out / config.SUMMARY_FILE, report)
    writers.write_manifest(
        out / config.MANIFEST_FILE,
        setup.resolved(),
        setup.engine.seed,
        {config.MC_REPORT_FILE: report_hash, config.SUMMARY_FILE: summary_hash},
    )
    logger.info("Monte Carlo verification %s", "passed" if report.passed else "FAILED")
    return config.EXIT_OK


def cmd_check_grad(setup):
    """Audit the hypergradient at seeded points around the optimum."""
    prob = setup.problem
    settings = setup.run.check_grad
    cx, cy = _center(prob)
    pairs = sample_points_around(prob, cx, cy, settings.points, settings.seed, settings.radius)

    with stage("gradient audit"):
        audit = audit_hypergradient(prob, [x for x, _ in pairs], tol=settings.tol)
    with stage("assumption checks"):
        assumptions = check_assumptions(prob, pairs, seed=settings.seed)

    out = writers.ensure_output_dir(setup.output_dir)
    writers.write_json(
        out / config.CHECK_FILE,
        {"problem": prob.name, **audit.as_dict(), "assumptions": assumptions.as_dict()},
    )
    if not audit.passed:
        worst = audit.worst
        logger.warning(
            "Gradient audit failed: error %.3e at point %d, coordinate %d",
            worst["grad_error"], worst["index"], worst["coordinate"],
        )
    return config.EXIT_OK


def cmd_validate(setup):
    """Every load-time check already ran in build_setup; add sampled assumption checks."""
    prob = setup.problem
    settings = setup.run.check_grad
    cx, cy = _center(prob)
    pairs = sample_points_around(prob, cx, cy, settings.points, settings.seed, settings.radius)
    report = check_assumptions(prob, pairs, seed=settings.seed)
    if report.eigenvalue_flagged:
        raise ConfigurationError(
            f"problem '{prob.name}': smallest inner Hessian eigenvalue {report.min_eigenvalue:.6g} "
            f"is below mu_g = {report.mu_g:.6g}"
        )
    if report.symmetry_flagged:
        raise ConfigurationError(f"problem '{prob.name}': inner Hessian is not symmetric")
    logger.info("Configuration is valid")
    return config.EXIT_OK


HANDLERS = {
    "predict": cmd_predict,
    "run": cmd_run,
    "mc": cmd_mc,
    "check-grad": cmd_check_grad,
    "validate": cmd_validate,
}


def run(argv=None):
    """Parse arguments, dispatch, and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    try:
        setup = load_setup(args)
        logger.info("Command '%s' on problem '%s'", args.command, setup.problem.name)
        return HANDLERS[args.command](setup)
    except TTSAError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("Output error: %s", exc)
        return config.EXIT_CONFIG
    except Exception:
        logger.exception("Unexpected error")
        return config.EXIT_MATH


def main(argv=None):
    """Main entry point."""
    setup_logging()
    try:
        return run(argv)
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        return config.EXIT_MATH
    finally:
        logging.shutdown()


if __name__ == "__main__":
    sys.exit(main())
