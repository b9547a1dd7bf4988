"""
TTSA Bilevel Toolkit - Result Writers Module
============================================

Persists command results:
- trajectory.csv   one row per logged point, 17 significant digits
- *.json           reports, keys sorted, floats with 17 significant digits
- manifest.json    resolved config, seed, version, SHA-256 of the outputs
- summary.txt      human-readable Monte Carlo verdict

Everything except the manifest's "generated" section is a pure function of
the inputs, so reruns produce identical bytes.
"""

import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from ttsa import __version__, config

logger = logging.getLogger("Writer")


def ensure_output_dir(path):
    """Create the output directory (and parents); OSError propagates."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def format_float(value):
    return format(float(value), config.FLOAT_FORMAT)


def jsonable(obj):
    """
    Convert numpy containers and scalars to plain JSON types.

    Non-finite floats become the strings "inf", "-inf" and "nan".
    """
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isfinite(value):
            return value
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return obj


def _json_float(value):
    text = format_float(value)
    # keep the token a JSON float when the digits form an integer
    if not any(c in text for c in ".e"):
        text += ".0"
    return text


def _encode(obj, level):
    if isinstance(obj, float):
        return _json_float(obj)
    if isinstance(obj, (dict, list)) and not obj:
        return "{}" if isinstance(obj, dict) else "[]"
    pad = "  " * (level + 1)
    if isinstance(obj, dict):
        items = [f"{pad}{json.dumps(key)}: {_encode(obj[key], level + 1)}" for key in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + "  " * level + "}"
    if isinstance(obj, list):
        items = [pad + _encode(value, level + 1) for value in obj]
        return "[\n" + ",\n".join(items) + "\n" + "  " * level + "]"
    return json.dumps(obj)


def dumps(payload):
    """JSON text with sorted keys, two-space indent and floats in FLOAT_FORMAT."""
    return _encode(jsonable(payload), 0) + "\n"


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def write_text(path, text):
    """Write UTF-8 text and return its SHA-256."""
    data = text.encode("utf-8")
    Path(path).write_bytes(data)
    logger.info("Wrote %s", path)
    return sha256_bytes(data)


def write_json(path, payload):
    return write_text(path, dumps(payload))


def trajectory_csv(traj):
    """CSV text of a trajectory: t, x_0.., y_0.., gamma1, gamma2."""
    d1 = traj.xs.shape[1]
    d2 = traj.ys.shape[1]
    header = ["t"] + [f"x_{i}" for i in range(d1)] + [f"y_{j}" for j in range(d2)] + ["gamma1", "gamma2"]
    rows = [",".join(header)]
    for k in range(len(traj)):
        values = [traj.times[k], *traj.xs[k], *traj.ys[k], traj.gamma1[k], traj.gamma2[k]]
        rows.append(",".join(format_float(v) for v in values))
    return "\n".join(rows) + "\n"


def write_trajectory(path, traj):
    return write_text(path, trajectory_csv(traj))


def write_manifest(path, resolved_config, seed, outputs, extra=None):
    """
    Reproducibility manifest.

    Args:
        path (Path): Destination
        resolved_config (dict): Full configuration after overrides
        seed (int): Base seed
        outputs (dict): File name -> SHA-256 of its bytes
        extra (dict): Further hashed fields (e.g. early termination)

    Returns:
        str: SHA-256 of the hashed section
    """
    hashed = {
        "config": resolved_config,
        "seed": int(seed),
        "version": __version__,
        "outputs": dict(outputs),
    }
    if extra:
        hashed.update(extra)
    content_hash = sha256_bytes(dumps(hashed).encode("utf-8"))
    manifest = {
        "hashed": hashed,
        "content_hash": content_hash,
        "generated": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())},
    }
    write_json(path, manifest)
    return content_hash


def _fmt(value, spec=".4g"):
    if value is None:
        return "skipped"
    return format(value, spec)


def summary_text(report):
    """Plain-text verdict of an MCReport."""
    verdict = {True: "PASS", False: "FAIL", None: "skipped"}
    lines = [
        f"CLT verification: {'PASS' if report.passed else 'FAIL'}",
        f"replicates: {report.replicates_used} used of {report.replicates} ({report.blowups} blown up)",
        f"horizon T: {report.T:g}",
    ]
    if report.degenerate:
        lines.append("degenerate: predicted covariances are zero, comparisons skipped")
    tol = report.tolerances
    lines += [
        f"rel. error Sigma_x: {_fmt(report.rel_error_x)} (tol {tol['cov_rel_tol']:g}) "
        f"[{verdict[report.checks.get('cov_x')]}]",
        f"rel. error Sigma_y: {_fmt(report.rel_error_y)} (tol {tol['cov_rel_tol']:g}) "
        f"[{verdict[report.checks.get('cov_y')]}]",
        f"cross-block ratio: {_fmt(report.cross_block_ratio)} (tol {tol['cross_block_tol']:g}) "
        f"[{verdict[report.checks.get('cross_block')]}]",
    ]
    if report.cross_block_expected is not None:
        lines.append(f"  finite-horizon cross-block ratio: {report.cross_block_expected:.4g}")
    if report.ks:
        lines.append(f"KS p-values (min {tol['ks_pvalue_min']:g}) [{verdict[report.checks.get('ks')]}]:")
        for entry in report.ks:
            lines.append(f"  {entry['coordinate']}: p = {_fmt(entry['p_value'])}, D = {_fmt(entry['statistic'])}")
    else:
        lines.append(f"KS: skipped ({report.skipped.get('ks', 'not run')})")
    lines.append(
        f"mean rescaled error: {np.linalg.norm(report.mean_error):.4g} (bound {report.bias_bound:.4g}) "
        f"[{verdict[report.checks.get('bias')]}]"
    )
    lines.append(f"median ||x_t - x*|| [{verdict[report.checks.get('convergence')]}]:")
    for t, m in zip(report.convergence_times, report.convergence_median):
        lines.append(f"  t = {t:g}: {m:.4g}")
    lines.append(f"  terminal bound: {report.convergence_bound:.4g}")
    if report.contraction is not None:
        lines.append(f"  contraction T/4 -> T: {report.contraction:.4g}")
    not_required = [name for name in config.MC_CHECKS if name not in report.required_checks]
    if not_required:
        lines.append(f"not required for pass: {', '.join(not_required)}")
    return "\n".join(lines) + "\n"


def write_summary(path, report):
    return write_text(path, summary_text(report))
