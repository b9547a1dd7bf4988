"""
TTSA Bilevel Toolkit - Configuration Module
===========================================

Centralized constants for the whole toolkit.
Defines numerical tolerances, finite-difference steps, engine and Monte Carlo
defaults, CLI exit codes, output file names and MQTT telemetry parameters.

Run-specific settings (problem, schedules, noise, horizon) come from the JSON
run configuration parsed by run_config.py; the values here are the defaults
and gates that document applies on top of.
"""

# ===========================
# NUMERICAL TOLERANCES
# ===========================
SYMMETRY_RTOL = 1e-10  # ||A - A^T||_F <= rtol * ||A||_F
STATIONARITY_TOL = 1e-8  # residual at a claimed known optimum
LINEARIZE_STATIONARITY_TOL = 1e-6  # residual accepted by linearize()
SOLVE_RESIDUAL_RTOL = 1e-8  # inner Hessian solve, relative to 1 + ||grad_y f||
HURWITZ_MARGIN = -1e-8  # eigenvalue real parts must lie below this
LYAPUNOV_RESIDUAL_RTOL = 1e-10
QUADRATURE_TAIL_TOL = 1e-12  # ||exp(A t_max)|| bound for the quadrature oracle
QUADRATURE_ORDER = 10  # Gauss-Legendre nodes per panel

# ===========================
# FINITE DIFFERENCES
# ===========================
FD_FALLBACK_REL_STEP = 1e-5  # missing second-derivative oracles, scaled by 1 + ||point||
FD_PHI_STEP = 1e-4  # central differences of Phi
FD_HYPERGRAD_STEP = 1e-3  # central differences of the hypergradient
INNER_SOLVE_TOL = 1e-12
INNER_SOLVE_MAX_ITERS = 20000
POWER_ITERATIONS = 100
OPTIMUM_TOL = 1e-10
OPTIMUM_MAX_ITERS = 100000

# ===========================
# ASSUMPTION CHECKS
# ===========================
LIPSCHITZ_PROBES = 8  # random directions per sample point
LIPSCHITZ_PROBE_SCALE = 1e-2

# ===========================
# SDE ENGINE DEFAULTS
# ===========================
DEFAULT_BLOWUP_BOUND = 1e6  # ||x|| + ||y|| guard
DEFAULT_LOG_STRIDE = 1
DEFAULT_SEED = 0
NOISE_CHUNK_STEPS = 1024  # Gaussian blocks pre-drawn per stream at a time
OUTER_GRADIENT_HYPERGRAD = "hypergradient"
OUTER_GRADIENT_PARTIAL = "partial"
OUTER_GRADIENT_MODES = (OUTER_GRADIENT_HYPERGRAD, OUTER_GRADIENT_PARTIAL)

# ===========================
# MONTE CARLO VERIFICATION
# ===========================
MC_BLOCK_SIZE = 50  # replicates integrated together; fixed so results ignore worker count
MC_MIN_REPLICATES = 2
KS_MIN_SAMPLES = 20
COV_REL_TOL = 0.20
CROSS_BLOCK_TOL = 0.15
KS_PVALUE_MIN = 0.01
BIAS_SIGMAS = 3.0
BLOWUP_FRACTION_MAX = 0.01
PROJECTION_SEED = 20240607  # fixed random projection for the joint KS check
CHECKPOINT_FRACTIONS = (0.125, 0.25, 0.5, 1.0)
THREADS_ENV_VAR = "TTSA_THREADS"
MC_CHECKS = ("cov_x", "cov_y", "cross_block", "ks", "bias", "convergence")

# ===========================
# GRADIENT AUDIT
# ===========================
CHECK_GRAD_POINTS = 20
CHECK_GRAD_TOL = 1e-4
CHECK_GRAD_SEED = 7
CHECK_GRAD_RADIUS = 2.0

# ===========================
# CLI EXIT CODES
# ===========================
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MATH = 3
EXIT_BLOWUP = 4
EXIT_INVALID_EXPERIMENT = 5

# ===========================
# OUTPUT FILES
# ===========================
PREDICT_FILE = "predict.json"
TRAJECTORY_FILE = "trajectory.csv"
MANIFEST_FILE = "manifest.json"
MC_REPORT_FILE = "mc_report.json"
SUMMARY_FILE = "summary.txt"
CHECK_FILE = "check.json"
FLOAT_FORMAT = ".17g"  # 17 significant digits, lossless for doubles
DEFAULT_OUTPUT_DIR = "out"

# ===========================
# LOGGING
# ===========================
LOG_FORMAT = "[%(name)s] %(message)s"
LOG_LEVEL = "INFO"
LOG_LEVEL_ENV_VAR = "TTSA_LOG_LEVEL"

# ===========================
# MQTT TELEMETRY (optional)
# ===========================
MQTT_BROKER_HOST = "broker.hivemq.com"
MQTT_BROKER_PORT = 1883
MQTT_CLIENT_ID = "ttsa_runner_01"
MQTT_QOS = 1
MQTT_KEEP_ALIVE = 60
MQTT_TOPIC_PREFIX = "ttsa/runs"
MQTT_TOPICS = {
    "status": "status",
    "progress": "progress",
    "result": "result",
}
