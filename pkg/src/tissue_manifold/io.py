"""Report, plot-data and manifest files, with JSON-schema validation."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema

from .errors import FormatError

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_VEC = {"type": "array", "items": _NUM}

TIMEPOINT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["label", "n", "delta_E", "se_delta_E", "drift", "se_drift", "p_welch", "p_perm"],
    "properties": {
        "label": {"type": "string"},
        "n": {"type": "integer", "minimum": 2},
        "n_healthy": {"type": "integer", "minimum": 0},
        "mean_E": _NUM,
        "se_E": {"type": "number", "minimum": 0},
        "delta_E": _NUM,
        "se_delta_E": {"type": "number", "minimum": 0},
        "delta_E_all": _NUM,
        "se_delta_E_all": {"type": "number", "minimum": 0},
        "mean_projection": _NUM,
        "drift": _NUM,
        "se_drift": {"type": "number", "minimum": 0},
        "drift_all": _NUM,
        "se_drift_all": {"type": "number", "minimum": 0},
        "p_welch": {"type": "number", "minimum": 0, "maximum": 1},
        "p_perm": {"type": "number", "minimum": 0, "maximum": 1},
        "p_welch_drift": {"type": "number", "minimum": 0, "maximum": 1},
        "p_perm_drift": {"type": "number", "minimum": 0, "maximum": 1},
        "model_digest": {"type": "string"},
        "reference": {"enum": ["healthy_basin", "whole_mask"]},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "axis", "baseline", "timepoints", "digests"],
    "properties": {
        "version": {"const": 1},
        "axis": {
            "type": "object",
            "additionalProperties": False,
            "required": ["c_H", "c_T", "length"],
            "properties": {"c_H": _VEC, "c_T": _VEC, "length": {"type": "number",
                                                                "exclusiveMinimum": 0}},
        },
        "baseline": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "mean_E", "se"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "mean_E": _NUM,
                "se": {"type": "number", "minimum": 0},
                "n_healthy": {"type": "integer", "minimum": 0},
                "mean_E_healthy": _NUM,
                "se_healthy": {"type": "number", "minimum": 0},
                "n_minima": {"type": "integer", "minimum": 0},
                "healthy_basin": {"type": "integer"},
                "tumour_basin": {"type": "integer"},
                "barrier": _NUM_OR_NULL,
                "healthy_width": _NUM_OR_NULL,
            },
        },
        "timepoints": {"type": "array", "items": TIMEPOINT_SCHEMA},
        "digests": {
            "type": "object",
            "additionalProperties": False,
            "required": ["model", "config"],
            "properties": {"model": {"type": "string"}, "config": {"type": "string"}},
        },
    },
}


def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, shortest float repr, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def validate_report(obj) -> None:
    try:
        jsonschema.validate(obj, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"report does not match schema: {exc.message}") from None


def report_to_json(report) -> str:
    obj = report.to_dict() if hasattr(report, "to_dict") else report
    validate_report(obj)
    return dumps(obj)


def _write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def write_report(path, report) -> Path:
    return _write(path, report_to_json(report))


def read_report(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None
    validate_report(obj)
    return obj


def write_plotdata(directory, report) -> list:
    """One ``plot_<label>.csv`` per scan (baseline first) plus ``axis_profile.csv``.

    Each scan file has one row per masked voxel: ``projection,energy,grad_norm``.
    """
    directory = Path(directory)
    paths = []
    for plot in report.plotdata:
        paths.append(_write(directory / f"plot_{plot.label}.csv", plot.to_csv()))
    if report.axis_profile is not None:
        paths.append(_write(directory / "axis_profile.csv", report.axis_profile.to_csv()))
    return paths


def write_json(path, obj) -> Path:
    return _write(path, dumps(obj))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, config: dict, inputs=(), outputs=()) -> Path:
    """Record a run: command, config digest and sha256 of every input and output.

    Paths are stored as given, so identical invocations give identical manifests.
    """
    config_text = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=False)
    manifest = {
        "version": 1,
        "command": command,
        "config": config,
        "config_digest": hashlib.sha256(config_text.encode()).hexdigest(),
        "inputs": [{"path": Path(p).name, "sha256": file_digest(p)} for p in inputs],
        "outputs": [{"path": Path(p).name, "sha256": file_digest(p)} for p in outputs],
    }
    return _write(path, dumps(manifest))
