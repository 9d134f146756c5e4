"""
Configuration resolution: environment defaults and TOML run files
"""
import os
import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 backport
    import tomli as tomllib

from utils.errors import UsageError, IoError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

LOG_LEVEL = os.environ.get("KPR_LOG_LEVEL", "INFO").upper()
N_JOBS = int(os.environ.get("KPR_N_JOBS", "1"))
JITTER = float(os.environ.get("KPR_JITTER", "1e-8"))
PSD_TOL = float(os.environ.get("KPR_PSD_TOL", "1e-8"))

# Keys accepted in a simulation run file, with the type each value is coerced to
SIMULATION_KEYS = {
    "scenario": str,
    "r2_grid": list,
    "perturbation_levels": list,
    "sparsity_levels": list,
    "replications": int,
    "seed": int,
    "tuning_rules": list,
    "folds": int,
    "lambda_grid_size": int,
    "lambda_low": float,
    "lambda_high": float,
    "n_samples": int,
    "n_taxa": int,
    "n_jobs": int,
}


def load_run_file(path):
    """
    Read a flat TOML run file and return its validated key-value pairs.

    Unknown keys are rejected so that a typo never silently falls back to
    a default.
    """
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise IoError(f"Run file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        logger.error(f"Error parsing run file {path}: {e}")
        raise UsageError(f"Invalid run file {path}: {e}") from e

    unknown = sorted(set(data) - set(SIMULATION_KEYS))
    if unknown:
        raise UsageError(f"Unknown keys in run file {path}: {', '.join(unknown)}")

    resolved = {}
    for key, value in data.items():
        expected = SIMULATION_KEYS[key]
        if expected is list and not isinstance(value, list):
            value = [value]
        elif expected is not list:
            try:
                value = expected(value)
            except (TypeError, ValueError) as e:
                raise UsageError(f"Run file key '{key}' expects {expected.__name__}, got {value!r}") from e
        resolved[key] = value
    return resolved


def merge_settings(file_settings, flag_settings):
    """Overlay command-line values (ignoring unset ones) on run-file values"""
    merged = dict(file_settings or {})
    for key, value in flag_settings.items():
        if value is None or value == ():
            continue
        merged[key] = list(value) if isinstance(value, tuple) else value
    return merged


def parse_float_list(text):
    """Parse '0.1,0.5,0.9' into [0.1, 0.5, 0.9]"""
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"Expected a comma-separated list of numbers, got '{text}'") from e
