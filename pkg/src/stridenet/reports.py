"""Structured JSON run reports and their published schema."""

from __future__ import annotations

import json
import math

import numpy as np

from . import __version__
from .io import atomic_write_text

SCHEMA_VERSION = "1.0"

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "stridenet run report",
    "type": "object",
    "required": ["schema_version", "command", "config", "timings", "outputs"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "tool_version": {"type": "string"},
        "command": {"enum": ["classify", "roughness", "train", "eval", "bench"]},
        "config": {"type": "object"},
        "timings": {"type": "object"},
        "outputs": {"type": "object"},
        "errors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["input", "error"],
                "properties": {"input": {"type": "string"}, "error": {"type": "string"}},
            },
        },
    },
}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def make_report(command: str, config: dict, outputs: dict, timings: dict | None = None,
                errors: list | None = None) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": command,
        "config": config,
        "timings": timings or {},
        "outputs": outputs,
    }
    if errors is not None:
        report["errors"] = errors
    return _plain(report)


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def write_report(report: dict, path) -> None:
    atomic_write_text(path, dumps(report) + "\n")


def without_timings(report: dict) -> dict:
    """Copy of ``report`` minus wall-clock fields, for determinism comparisons."""
    out = dict(report)
    out.pop("timings", None)
    return out
