"""Versioned JSON schemas for every artifact the pipeline reads or writes.

Each artifact embeds its schema id in a top-level "schema" field, e.g.
"mindkit.report/1". Floats that would not survive strict JSON (NaN,
infinities) are written as null, so numeric fields generally admit null.
"""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

from .errors import DataError


def jsonsafe(value):
    """Recursively convert numpy scalars/arrays and non-finite floats so the
    result serializes as strict JSON (NaN and infinities become null)."""
    if isinstance(value, dict):
        return {k: jsonsafe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonsafe(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonsafe(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    return value

_NUM = {"type": ["number", "null"]}
_NUMS = {"type": "array", "items": _NUM}
_NUM_GRID = {"type": "array", "items": _NUMS}
_STRS = {"type": "array", "items": {"type": "string"}}
_INTS = {"type": "array", "items": {"type": "integer"}}

_ARRAY_BLOB = {
    "type": "object",
    "required": ["shape", "data"],
    "properties": {"shape": _INTS, "data": _NUMS},
}

SCHEMAS: dict[str, dict] = {
    "mindkit.dataset/1": {
        "type": "object",
        "required": ["schema", "task", "splits"],
        "properties": {
            "schema": {"const": "mindkit.dataset/1"},
            "task": {"enum": ["classification", "regression"]},
            "splits": {
                "type": "object",
                "additionalProperties": _STRS,
            },
        },
    },
    "mindkit.truth/1": {
        "type": "object",
        "required": ["schema", "task", "feature_names", "weights",
                     "invariant_features", "strong_features", "duplicates"],
        "properties": {
            "schema": {"const": "mindkit.truth/1"},
            "task": {"enum": ["classification", "regression"]},
            "feature_names": _STRS,
            "weights": _NUMS,
            "invariant_features": _INTS,
            "strong_features": _INTS,
            "planted": _INTS,
            "duplicates": {"type": "array", "items": _INTS},
            "missing_indicator_of": {"type": "object"},
            "seed": {"type": "integer"},
            "n": {"type": "integer"},
            "seq_len": {"type": ["integer", "null"]},
        },
    },
    "mindkit.model/1": {
        "type": "object",
        "required": ["schema", "kind", "output", "input_dim", "seq_len",
                     "params"],
        "properties": {
            "schema": {"const": "mindkit.model/1"},
            "kind": {"enum": ["linear", "mlp", "seqconv"]},
            "output": {"enum": ["probability", "regression", "gaussian"]},
            "input_dim": {"type": "integer"},
            "seq_len": {"type": ["integer", "null"]},
            "hidden": _INTS,
            "dilations": _INTS,
            "kernel_size": {"type": "integer"},
            "seed": {"type": "integer"},
            "params": {"type": "object", "additionalProperties": _ARRAY_BLOB},
        },
    },
    "mindkit.transform/1": {
        "type": "object",
        "required": ["schema", "kind", "params"],
        "properties": {
            "schema": {"const": "mindkit.transform/1"},
            "kind": {"enum": ["gating", "residual", "basis"]},
            "params": {"type": "object"},
            "intercept": {"type": "boolean"},
            "basis": {
                "type": "object",
                "required": ["kind", "K", "T"],
                "properties": {
                    "kind": {"enum": ["chebyshev", "pulse"]},
                    "K": {"type": "integer"},
                    "T": {"type": "integer"},
                    "residual_channel": {"type": "boolean"},
                },
            },
        },
    },
    "mindkit.report/1": {
        "type": "object",
        "required": ["schema", "score_kind", "lambda", "features",
                     "score_mean", "score_std", "correlation_mean",
                     "correlation_std", "restarts", "config"],
        "properties": {
            "schema": {"const": "mindkit.report/1"},
            "score_kind": {"enum": ["gates", "gates_by_channel",
                                    "correlation"]},
            "lambda": _NUM,
            "features": _STRS,
            "score_mean": _NUMS,
            "score_std": _NUMS,
            "correlation_mean": _NUMS,
            "correlation_std": _NUMS,
            "channels": {
                "type": "object",
                "required": ["names", "score_mean", "score_std"],
                "properties": {"names": _STRS, "score_mean": _NUM_GRID,
                               "score_std": _NUM_GRID},
            },
            "restarts": {
                "type": "object",
                "required": ["selected", "failed", "runs"],
                "properties": {
                    "selected": _INTS,
                    "failed": _INTS,
                    "runs": {"type": "array", "items": {"type": "object"}},
                },
            },
            "config": {"type": "object"},
        },
    },
    "mindkit.train/1": {
        "type": "object",
        "required": ["schema", "kind", "history"],
        "properties": {
            "schema": {"const": "mindkit.train/1"},
            "kind": {"type": "string"},
            "adversarial": {"type": "boolean"},
            "history": {
                "type": "object",
                "required": ["train_loss", "val_loss"],
                "properties": {"train_loss": _NUMS, "val_loss": _NUMS,
                               "lr": _NUMS},
            },
        },
    },
    "mindkit.tune/1": {
        "type": "object",
        "required": ["schema", "lambda", "feasible", "trace"],
        "properties": {
            "schema": {"const": "mindkit.tune/1"},
            "lambda": _NUM,
            "feasible": {"type": "boolean"},
            "trace": {"type": "array", "items": {
                "type": "object",
                "required": ["lambda", "w1", "cosine", "feasible"],
            }},
        },
    },
    "mindkit.oracle/1": {
        "type": "object",
        "required": ["schema", "lambda", "gates", "degenerate"],
        "properties": {
            "schema": {"const": "mindkit.oracle/1"},
            "lambda": _NUM,
            "gates": _NUMS,
            "unclamped": _NUMS,
            "degenerate": {"type": "boolean"},
        },
    },
    "mindkit.sanity/1": {
        "type": "object",
        "required": ["schema", "baseline", "layers"],
        "properties": {
            "schema": {"const": "mindkit.sanity/1"},
            "baseline": {"type": "object",
                         "required": ["rho_mean", "rho_std"],
                         "properties": {"rho_mean": _NUM, "rho_std": _NUM}},
            "layers": {"type": "array", "items": {
                "type": "object",
                "required": ["layer", "rho_mean", "rho_std", "failures"],
                "properties": {"layer": {"type": "string"},
                               "rho_mean": _NUM, "rho_std": _NUM,
                               "rhos": _NUMS, "failures": {"type": "integer"}},
            }},
        },
    },
    "mindkit.baselines/1": {
        "type": "object",
        "required": ["schema", "features", "saliency",
                     "integrated_gradients"],
        "properties": {
            "schema": {"const": "mindkit.baselines/1"},
            "features": _STRS,
            "saliency": _NUMS,
            "integrated_gradients": _NUMS,
            "ig_steps": {"type": "integer"},
            "completeness_gap": _NUM,
            "spearman": {"type": "array", "items": {
                "type": "object",
                "required": ["pair", "rho", "p"],
                "properties": {"pair": _STRS, "rho": _NUM, "p": _NUM},
            }},
        },
    },
    "mindkit.error/1": {
        "type": "object",
        "required": ["schema", "error", "message"],
        "properties": {
            "schema": {"const": "mindkit.error/1"},
            "error": {"type": "string"},
            "message": {"type": "string"},
            "command": {"type": "string"},
        },
    },
}


def validate_artifact(doc: dict) -> str:
    """Check a document against the schema it names; returns the schema id."""
    if not isinstance(doc, dict) or "schema" not in doc:
        raise DataError("artifact lacks a 'schema' field")
    name = doc["schema"]
    schema = SCHEMAS.get(name)
    if schema is None:
        raise DataError(f"unknown schema {name!r}")
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise DataError(f"artifact does not match {name}: {exc.message}") from exc
    return name


def write_json(path, doc: dict) -> None:
    """Validate and write one artifact (strict JSON, trailing newline)."""
    validate_artifact(doc)
    Path(path).write_text(
        json.dumps(doc, indent=2, allow_nan=False) + "\n")


def read_json(path, expect: str | None = None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    name = validate_artifact(doc)
    if expect is not None and name != expect:
        raise DataError(f"{path} holds {name}, expected {expect}")
    return doc
