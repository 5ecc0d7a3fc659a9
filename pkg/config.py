"""
Configuration loader with .env file support.

This module loads environment variables from .env file if it exists, and
resolves run configuration with the precedence

    command-line flag > config file > profile > built-in default

All commands in main.py go through load_run_config().
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import ValidationError

from shared.schemas import RunConfig

try:
    from dotenv import load_dotenv
except ImportError:
    # If python-dotenv not installed, just use os.getenv
    def load_dotenv(*args, **kwargs):
        pass


logger = logging.getLogger(__name__)

OUT_ROOT_ENV = "S4SEG_OUT_ROOT"
DEFAULT_OUT_ROOT = Path("runs")

# Named starting points below the config file. "standard" is the built-in default.
PROFILES: Dict[str, Dict[str, Any]] = {
    "standard": {},
    "desk": {
        "image_height": 64,
        "image_width": 64,
        "n_slices": 1000,
        "batch_size": 6,
        "iterations": 2000,
    },
}


def load_config():
    """Load environment variables from .env file."""
    # Look for .env in project root
    env_path = Path(__file__).parent / ".env"

    if env_path.exists():
        load_dotenv(dotenv_path=env_path, override=False)
    # If no .env, silently use system environment variables


def get_out_root() -> Path:
    """Default parent directory for datasets, runs and sweeps."""
    value = os.getenv(OUT_ROOT_ENV)
    return Path(value) if value else DEFAULT_OUT_ROOT


def read_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Read a flat JSON config file. A missing path means 'no file layer'."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must contain a JSON object, got {type(data).__name__}")
    return data


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    *,
    profile: str = "standard",
) -> RunConfig:
    """
    Resolve a RunConfig from defaults, a profile, a JSON file and flag overrides.

    Overrides whose value is None are treated as "flag not given".

    Raises:
        pydantic.ValidationError: if any resolved value violates the schema.
        KeyError: for an unknown profile name.
    """
    if profile not in PROFILES:
        raise KeyError(f"Unknown profile '{profile}'. Choose from: {', '.join(PROFILES)}")

    merged: Dict[str, Any] = dict(PROFILES[profile])
    merged.update(read_config_file(path))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    cfg = RunConfig(**merged)
    logger.debug(f"Resolved config (profile={profile}, file={path}): {cfg.model_dump()}")
    return cfg


def format_validation_error(exc: ValidationError) -> str:
    """One 'field: message' line per violated field."""
    lines = []
    for err in exc.errors():
        field = ".".join(str(p) for p in err.get("loc", ())) or "<config>"
        lines.append(f"{field}: {err.get('msg', 'invalid value')}")
    return "\n".join(lines)


# Auto-load on import
load_config()
