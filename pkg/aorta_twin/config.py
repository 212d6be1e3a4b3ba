"""Environment settings and run-configuration parsing."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from pathlib import Path
from typing import Any

from dotenv import find_dotenv, load_dotenv
from pydantic import ValidationError

from .errors import ConfigError
from .models import Hyperparameters, NoiseSpec, PriorSpec, RunConfig, ScenarioKind

logger = logging.getLogger(__name__)

# Load environment variables from root .env file
load_dotenv(find_dotenv(usecwd=True))

LOG_DIR = os.getenv("AORTA_TWIN_LOG_DIR", "logs")
OUTPUT_DIR = os.getenv("AORTA_TWIN_OUTPUT_DIR", "runs/default")
THREADS = int(os.getenv("AORTA_TWIN_THREADS", 1))
POISSON_METHOD = os.getenv("AORTA_TWIN_POISSON", "direct")

# Shipped filter defaults per scenario; everything not listed comes from the model defaults
SCENARIO_DEFAULTS: dict[ScenarioKind, dict[str, Any]] = {
    ScenarioKind.CONSTANT: {
        "prior": {"state_mean": 0.01, "state_variance": 1e-10, "param_mean": 0.015, "param_variance": 4e-6},
        "noise": {"process_variance": 1e-8, "measurement_variance": 1e-10},
        "observation_span": 2,
    },
    ScenarioKind.TIME_DEPENDENT: {
        "prior": {"state_mean": 0.1, "state_variance": 1e-4, "param_mean": 0.1, "param_variance": 4e-4},
        "noise": {"process_variance": 1e-4, "measurement_variance": 1e-8},
        "observation_span": 2,
    },
    ScenarioKind.TIME_SPACE_DEPENDENT: {
        "prior": {"state_mean": 0.1, "state_variance": 1e-4, "param_mean": 0.1, "param_variance": 4e-4},
        "noise": {"process_variance": 1e-4, "measurement_variance": 1e-8},
        "observation_span": 2,
    },
}

# Spans swept for the constant scenario
CONSTANT_SPAN_SWEEP = (2, 4, 5)


def default_hyperparameters(kind: ScenarioKind) -> Hyperparameters:
    """Shipped filter defaults for a scenario kind."""
    values = SCENARIO_DEFAULTS[ScenarioKind(kind)]
    return Hyperparameters(
        n_members=80,
        dt=0.01,
        t_final=1.0,
        observation_span=values["observation_span"],
        prior=PriorSpec(**values["prior"]),
        noise=NoiseSpec(**values["noise"]),
    )


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _line_of(text: str, key: str) -> int | None:
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def config_from_dict(data: dict[str, Any], text: str = "") -> RunConfig:
    """Validate a (possibly partial) configuration mapping with scenario defaults filled in."""
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be an object")
    raw_kind = data.get("scenario", ScenarioKind.CONSTANT.value)
    try:
        kind = ScenarioKind(raw_kind)
    except ValueError:
        choices = ", ".join(k.value for k in ScenarioKind)
        raise ConfigError(f"unknown scenario '{raw_kind}' (expected one of {choices})", key="scenario",
                          line=_line_of(text, "scenario")) from None

    defaults = {
        "scenario": kind.value,
        "hyperparameters": default_hyperparameters(kind).model_dump(mode="json"),
        "output_dir": OUTPUT_DIR,
        "threads": THREADS,
        "poisson": POISSON_METHOD,
    }
    merged = _deep_merge(defaults, data)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        error = e.errors()[0]
        path = [str(part) for part in error["loc"]]
        key = ".".join(path) if path else None
        line = _line_of(text, path[-1]) if path else None
        raise ConfigError(error["msg"], key=key, line=line) from e


def read_config_data(path: str | Path) -> tuple[dict[str, Any], str]:
    """Raw JSON mapping and source text of a config file (empty file -> {})."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return {}, text
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be an object", line=1)
    return data, text


def parse_config(path: str | Path) -> RunConfig:
    """Read a JSON run configuration; an empty file yields every default.

    Args:
        path: Location of the JSON document

    Returns:
        Fully validated RunConfig
    """
    data, text = read_config_data(path)
    config = config_from_dict(data, text)
    logger.debug(f"Parsed config {path}: scenario={config.scenario.value}")
    return config


def serialize_config(config: RunConfig) -> str:
    return config.model_dump_json(indent=2)


def save_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(config) + "\n", encoding="utf-8")
    return path


# Settings a stored truth record depends on; anything else may change between runs
TRUTH_FIELDS: dict[str, Any] = {
    "scenario": True,
    "vessel": True,
    "coarse": True,
    "fine": True,
    "true_inlet": True,
    "outlet": True,
    "truth_fluid": True,
    "sensors": True,
    "poisson": True,
    "hyperparameters": {"dt", "t_final"},
    "seeds": {"truth"},
}


def truth_fingerprint(config: RunConfig) -> str:
    """Digest of the settings that determine the truth record."""
    payload = json.dumps(config.model_dump(mode="json", include=TRUTH_FIELDS), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
