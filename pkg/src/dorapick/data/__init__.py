"""Packaged metadata: the standard object set and the default scenario."""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path


def _read(name: str) -> str:
    return resources.files("dorapick.data").joinpath(name).read_text()


def builtin_objects() -> list[dict]:
    return json.loads(_read("objects.json"))


def default_scenario_path() -> Path | None:
    """Resolve the default scenario file, honoring DORAPICK_CONFIG_DIR."""
    override = os.environ.get("DORAPICK_CONFIG_DIR")
    if override:
        candidate = Path(override) / "scenario_default.json"
        if candidate.exists():
            return candidate
    return None


def default_scenario() -> dict:
    path = default_scenario_path()
    if path is not None:
        return json.loads(path.read_text())
    return json.loads(_read("scenario_default.json"))
