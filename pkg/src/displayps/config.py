"""Experiment configuration: a single JSON document validated against a published schema.

Every section is optional; missing keys take the values in :data:`DEFAULTS`.
Unknown keys anywhere are rejected before any computation starts.
"""

import copy
import json
from pathlib import Path

import jsonschema

from .learning import FAMILIES, INIT_JITTER, TRAIN_DAMPING, TRAIN_NOISE
from .pipeline import BUNDLED_SCENES
from .scene import DEFAULT_DISPLAY, SCENE_KINDS
from .sensor import DEFAULT_EXPOSURES


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "resolution": 64,
    "base_depth": 0.10,
    "falloff": True,
    "ambient": 0.0,
    "camera": None,
    "scenes": [{"kind": k, "amplitude": a, "seed": s} for k, a, s in BUNDLED_SCENES],
    "display": {**DEFAULT_DISPLAY, "offset": list(DEFAULT_DISPLAY["offset"])},
    "patterns": {"family": "mono_gradient", "K": 4},
    "schedule": {"lr0": 0.3, "alpha": 20, "decay": 0.3, "epochs": 50},
    "learning": {
        "smooth_sigma": 0.0,
        "noise_sigma": TRAIN_NOISE,
        "damping": TRAIN_DAMPING,
        "init_jitter": INIT_JITTER,
        "albedo_mode": "scalar",
    },
    "sensor": {
        "enabled": True,
        "exposures": list(DEFAULT_EXPOSURES),
        "read_sigma": 0.002,
        "quantization_bits": 12,
        "weight": "tent",
        "clip_margin": 0.02,
        "headroom": 0.9,
        "reference_exposure": DEFAULT_EXPOSURES[0],
        "denoise_sigma": 0.0,
    },
    "reconstruction": {"undistort": True, "plane_depth": 0.10, "albedo_mode": "scalar", "damping": 0.0},
    "sweep": {
        "alphas": [5, 10, 15, 20],
        "alpha_families": ["mono_gradient", "olat", "mono_random"],
        "families": list(FAMILIES),
    },
}


def _obj(properties: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": properties}


_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_family = {"enum": list(FAMILIES)}
_albedo_mode = {"enum": ["scalar", "channel"]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "displayps experiment configuration",
    **_obj({
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "resolution": {"type": "integer", "minimum": 2},
        "base_depth": _pos,
        "falloff": {"type": "boolean"},
        "ambient": _nonneg,
        "camera": {"type": ["string", "null"]},
        "scenes": {
            "type": "array",
            "minItems": 1,
            "items": {**_obj({
                "kind": {"enum": list(SCENE_KINDS)},
                "amplitude": _nonneg,
                "seed": {"type": "integer", "minimum": 0},
            }), "required": ["kind"]},
        },
        "display": _obj({
            "rows": {"type": "integer", "minimum": 1},
            "cols": {"type": "integer", "minimum": 1},
            "width_m": _pos,
            "height_m": _pos,
            "offset": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        }),
        "patterns": _obj({
            "family": _family,
            "K": {"type": "integer", "minimum": 1},
        }),
        "schedule": _obj({
            "lr0": _pos,
            "alpha": {"type": "integer", "minimum": 1},
            "decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "epochs": {"type": "integer", "minimum": 0},
        }),
        "learning": _obj({
            "smooth_sigma": _nonneg,
            "noise_sigma": _nonneg,
            "damping": _nonneg,
            "init_jitter": _nonneg,
            "albedo_mode": _albedo_mode,
        }),
        "sensor": _obj({
            "enabled": {"type": "boolean"},
            "exposures": {"type": "array", "items": _pos, "minItems": 1, "uniqueItems": True},
            "read_sigma": _nonneg,
            "quantization_bits": {"type": "integer", "minimum": 8, "maximum": 16},
            "weight": {"enum": ["tent", "uniform"]},
            "clip_margin": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
            "headroom": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "reference_exposure": _pos,
            "denoise_sigma": _nonneg,
        }),
        "reconstruction": _obj({
            "undistort": {"type": "boolean"},
            "plane_depth": _pos,
            "albedo_mode": _albedo_mode,
            "damping": _nonneg,
        }),
        "sweep": _obj({
            "alphas": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            "alpha_families": {"type": "array", "items": _family, "minItems": 1},
            "families": {"type": "array", "items": _family, "minItems": 1},
        }),
    }),
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _path_of(error: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def validate(config: dict) -> dict:
    """Validate a (partial) config and return it merged over the defaults."""
    if not isinstance(config, dict):
        raise ConfigError("configuration must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        details = "; ".join(f"{_path_of(e)}: {e.message}" for e in errors)
        raise ConfigError(f"invalid configuration: {details}")
    return _merge(DEFAULTS, config)


def load_config(path=None) -> dict:
    if path is None:
        return validate({})
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate(data)


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True) + "\n"
