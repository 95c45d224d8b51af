"""Config files: YAML/JSON mappings or flat ``key = value`` lines with dotted keys."""

from __future__ import annotations

import json
import os
from typing import Optional

from .training import TrainConfig

PRESETS = {"desk": TrainConfig.desk, "paper": TrainConfig.paper, "toy": TrainConfig.toy}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("\"'")


def parse_key_values(text: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def read_config_file(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    ext = os.path.splitext(path)[1].lower()
    if ext == ".json":
        return json.loads(text)
    if ext in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text) or {}
    return parse_key_values(text)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str] = None, scale: str = "desk", task: Optional[str] = None,
                overrides: Optional[dict] = None) -> TrainConfig:
    """Build a ``TrainConfig`` from a preset, then a file, then explicit overrides.

    A ``scale`` key inside the file selects the preset when no explicit
    ``scale`` argument differs from the default.
    """
    data = read_config_file(path) if path else {}
    scale = data.pop("scale", scale)
    if scale not in PRESETS:
        raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(PRESETS)}")
    task = task or data.get("task", "classification")
    base = PRESETS[scale](task=task).to_dict()
    merged = _merge(_merge(base, data), overrides or {})
    merged["task"] = task
    return TrainConfig.from_dict(merged)
