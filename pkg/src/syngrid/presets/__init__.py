"""Versioned hyperparameter presets, addressable by name."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path


def available() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))


def load(name_or_path: str) -> dict:
    """Load a preset by name or from a JSON file path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    if name_or_path not in available():
        raise KeyError(f"unknown preset {name_or_path!r}; available: {', '.join(available())}")
    return json.loads(resources.files(__name__).joinpath(f"{name_or_path}.json").read_text(encoding="utf-8"))
