"""
YAML configuration loader with strict key checking.
"""
import copy
import logging
from typing import Dict, Iterable, Optional

import yaml

logger = logging.getLogger(__name__)

STUDY_KINDS = ("mesh", "solve", "spectra", "convergence")

DEFAULTS = {
    "case": "vortex_2d",
    "nu": 1.0,
    "levels": [0.025, 0.0125, 0.00625, 0.003125],
    "domain": [[-0.25, 0.25], [-0.25, 0.25]],
    "jitter": 0.0,
    "seed": 0,
    "solver": {
        "method": "monolithic",
        "alpha_u": 0.7,
        "alpha_p": 0.3,
        "tol": 1e-8,
        "max_iter": 50000,
    },
    "tolerances": {
        "rate_window": [0.85, 1.25],
        "coercivity_slope": [2.6, 3.2],
        "infsup_window": [0.05, 0.5],
        "infsup_decay": 0.5,
        "norm_spread": 0.2,
        "consistency_slope": 1.3,
        "energy_defect": 1e-8,
    },
    "studies": ["coercivity", "infsup"],
    "samples": 20,
    "dense_limit": 2000,
    "output_dir": "results",
    "progress": True,
}

REQUIRED = {
    "mesh": ("levels", "domain"),
    "solve": ("case", "nu", "levels", "solver"),
    "spectra": ("nu", "levels", "studies"),
    "convergence": ("case", "nu", "levels", "solver"),
}


class ConfigLoaderError(Exception):
    pass


def load_config(path: str) -> Dict:
    """
    Load a YAML configuration file and return as a dict.
    Raises ConfigLoaderError if the file is not a dict or cannot be parsed.

    Parameters
    ----------
    path : str
        Path to the YAML file

    Returns
    -------
    dict
        Parsed configuration
    """
    try:
        with open(path, 'r') as f:
            config = yaml.safe_load(f)
        if not isinstance(config, dict):
            raise ConfigLoaderError(f"Config at {path} is not a dict.")
        logger.debug(f"Loaded config from {path}")
        return config
    except Exception as e:
        raise ConfigLoaderError(f"Failed to load config from {path}: {e}")


def merge_defaults(config: Dict, defaults: Optional[Dict] = None) -> Dict:
    """Recursively fill keys missing from ``config``; the inputs are not modified."""
    merged = copy.deepcopy(defaults if defaults is not None else DEFAULTS)
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_defaults(value, merged[key])
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _require(config: Dict, keys: Iterable[str], kind: str) -> None:
    missing = [k for k in keys if k not in config]
    if missing:
        raise ConfigLoaderError(f"{kind} config is missing keys: {', '.join(missing)}")


def validate_study_config(config: Dict, kind: str) -> Dict:
    """
    Check the sections a study kind needs and the ranges of shared keys.

    Raises
    ------
    ConfigLoaderError
        On an unknown kind, missing keys or out-of-range values
    """
    if kind not in STUDY_KINDS:
        raise ConfigLoaderError(f"Unknown study kind '{kind}', expected one of {STUDY_KINDS}")
    _require(config, REQUIRED[kind], kind)

    levels = config.get("levels")
    if levels is not None:
        if not isinstance(levels, list) or not levels:
            raise ConfigLoaderError("levels must be a non-empty list of mesh sizes")
        if any(not isinstance(h, (int, float)) or h <= 0 for h in levels):
            raise ConfigLoaderError(f"levels must be positive numbers, got {levels}")
    if "nu" in config and not config["nu"] > 0:
        raise ConfigLoaderError(f"nu must be positive, got {config['nu']}")
    if "jitter" in config and not 0.0 <= config["jitter"] < 1.0:
        raise ConfigLoaderError(f"jitter must lie in [0, 1), got {config['jitter']}")
    solver = config.get("solver")
    if solver is not None:
        if not isinstance(solver, dict):
            raise ConfigLoaderError("solver must be a mapping")
        if solver.get("method", "monolithic") not in ("monolithic", "simple"):
            raise ConfigLoaderError(f"Unknown solver method '{solver.get('method')}'")
    return config
