from __future__ import annotations

import configparser
import importlib.resources
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import TypeVar

from pydantic import ValidationError

from .util import BOLD, NC

logger = logging.getLogger(__name__)

T = TypeVar("T", int, float, str)

# Overrides the driver endpoint named in an experiment config
WEBDRIVER_URL_ENV = "AGENTAB_WEBDRIVER_URL"


class ConfigError(ValueError):
    """An experiment configuration could not be read or failed validation"""


@lru_cache
def get_defaults() -> configparser.ConfigParser:
    """Get the packaged default settings from the installation directory"""
    configuration = configparser.ConfigParser()
    with importlib.resources.as_file(
        importlib.resources.files("agentab") / "agentab.ini"
    ) as fo:
        configuration.read(fo)
    return configuration


def default(section: str, key: str, kind: type[T]) -> T:
    """Read one typed value out of the packaged defaults"""
    value = get_defaults()[section][key]
    return kind(value)


def data_path(name: str) -> Path:
    """Location of a file shipped in the package data folder"""
    return Path(str(importlib.resources.files("agentab") / "data" / name))


def resolve_input_path(path: Path | str, base_dir: Path | None = None) -> Path:
    """
    Find an input file named in a config document.

    Absolute paths are used as-is. Relative paths are tried against the
    folder holding the config, then against the packaged data folder.
    """
    path = Path(path)
    if path.is_absolute():
        return path
    candidates = []
    if base_dir is not None:
        candidates.append(base_dir / path)
    candidates.append(data_path(str(path)))
    for candidate in candidates:
        if candidate.exists():
            return candidate
    raise ConfigError(
        f"Could not find input file {BOLD}{path}{NC} (looked in: {', '.join(str(c) for c in candidates)})"
    )


def webdriver_endpoint(configured: str) -> str:
    """The driver endpoint to use, allowing an environment override"""
    if override := os.getenv(WEBDRIVER_URL_ENV):
        logger.debug(f"Using {WEBDRIVER_URL_ENV}={override} instead of {configured}")
        return override
    return configured


def json_pointer(loc: tuple[int | str, ...]) -> str:
    return "/" + "/".join(str(x).replace("~", "~0").replace("/", "~1") for x in loc)


def format_validation_error(error: ValidationError) -> list[str]:
    """Flatten a pydantic error into 'pointer: message' lines"""
    lines = []
    for entry in error.errors():
        # Discriminated unions add the tag name into the location
        loc = tuple(entry["loc"])
        lines.append(f"{json_pointer(loc)}: {entry['msg']}")
    return lines
