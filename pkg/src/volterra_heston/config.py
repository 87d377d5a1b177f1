"""Run configuration: JSON schema, defaults, and model construction."""
from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import jsonschema
import numpy as np

from .curves import InputCurve, Tabulated, ThetaForm
from .grid import TimeGrid
from .kernels import Kernel, kernel_from_spec
from .riccati import ModelParams

SCHEMA_VERSION = 1
CONFIG_TRAILER = b"VHCF"

_POS = {"type": "number", "exclusiveMinimum": 0}
_ALPHA = {"type": "number", "exclusiveMinimum": 0.5, "maximum": 1}
_TABLE = {"type": "object", "minProperties": 1, "patternProperties": {"": {"type": "number"}}}
_NUMBERS = {"type": "array", "items": {"type": "number"}, "minItems": 1}


def _block(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


def _by_kind(variants: dict) -> dict:
    """Dispatch on ``kind`` so validation errors point at the offending field."""
    return {"type": "object", "required": ["kind"], "properties": {"kind": {"enum": list(variants)}},
            "allOf": [{"if": {"properties": {"kind": {"const": k}}}, "then": v} for k, v in variants.items()]}


SCHEMA = _block({
    "schema_version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "model": _block({
        "lam": {"type": "number", "minimum": 0},
        "nu": {"type": "number", "minimum": 0},
        "rho": {"type": "number", "minimum": -1, "maximum": 1},
        "s0": _POS,
    }, ["lam", "nu", "rho"]),
    "kernel": _by_kind({
        "fractional": _block({"kind": {}, "c": _POS, "alpha": _ALPHA}, ["alpha"]),
        "gamma": _block({"kind": {}, "c": _POS, "alpha": _ALPHA, "lambda_k": {"type": "number", "minimum": 0}},
                        ["alpha"]),
        "expsum": _block({"kind": {}, "terms": {
            "type": "array", "minItems": 1,
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "prefixItems": [_POS, {"type": "number", "minimum": 0}]}}}, ["terms"]),
    }),
    "curve": {"oneOf": [
        _block({"tabulated": _TABLE}, ["tabulated"]),
        _block({"csv": {"type": "string"}}, ["csv"]),
        _block({"V0": {"type": "number", "minimum": 0},
                "theta": {"oneOf": [{"type": "number"}, _block({"tabulated": _TABLE}, ["tabulated"])]}},
               ["V0", "theta"]),
    ]},
    "grid": _block({"dt": _POS, "T": _POS}, ["dt", "T"]),
    "kernel_check": _block({"shift": _POS, "n_levels": {"type": "integer", "minimum": 2},
                            "reconstruction_tol": _POS}),
    "admissibility": _block({"ladder": {"oneOf": [{"type": "null"}, {"type": "array", "items": _POS}]},
                             "tol": {"oneOf": [{"type": "null"}, _POS]}}),
    "charfn": _block({"z": _NUMBERS}),
    "price": _block({"strikes": {"type": "array", "items": _POS, "minItems": 1},
                     "kind": {"enum": ["call", "put"]},
                     "damping": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}),
    "simulate": _block({"n_paths": {"type": "integer", "minimum": 1}}),
    "lift": _block({"n": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                    "rule": {"enum": ["geometric"]}, "z": _NUMBERS}),
}, ["schema_version", "model", "kernel", "curve", "grid"])

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)

DEFAULTS = {
    "seed": 0,
    "model": {"s0": 1.0},
    "kernel_check": {"shift": 0.1, "n_levels": 6, "reconstruction_tol": 1e-3},
    "admissibility": {"ladder": None, "tol": None},
    "charfn": {"z": [0.0, 0.5, 1.0, 2.0, 5.0]},
    "price": {"strikes": [0.8, 0.9, 1.0, 1.1, 1.2], "kind": "call", "damping": 0.75},
    "simulate": {"n_paths": 10000},
    "lift": {"n": [5, 10, 20, 40], "rule": "geometric", "z": [0.5, 1.0, 2.0]},
}
_KERNEL_DEFAULTS = {"fractional": {"c": 1.0}, "gamma": {"c": 1.0, "lambda_k": 0.0}, "expsum": {}}


class ConfigError(ValueError):
    """Configuration file missing, malformed, or inconsistent."""


def _table_items(table: dict) -> list[tuple[float, float]]:
    try:
        items = sorted((float(t), float(v)) for t, v in table.items())
    except ValueError as exc:
        raise ConfigError(f"tabulated curve keys must be times: {exc}") from None
    return items


def _canonical_table(table: dict) -> dict:
    return {repr(t): v for t, v in _table_items(table)}


def resolve(raw: dict, base_dir: Path | None = None, seed: int | None = None) -> dict:
    """Validate ``raw`` and return it with every default filled in.

    A CSV curve is read and inlined, so the resolved config stands alone.
    """
    exc = jsonschema.exceptions.best_match(_VALIDATOR.iter_errors(raw))
    if exc is not None:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}")
    cfg = copy.deepcopy(raw)
    for key, block in DEFAULTS.items():
        if isinstance(block, dict):
            cfg[key] = {**block, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, block)
    cfg["kernel"] = {**_KERNEL_DEFAULTS[cfg["kernel"]["kind"]], **cfg["kernel"]}
    if seed is not None:
        cfg["seed"] = int(seed)
    curve = cfg["curve"]
    if "csv" in curve:
        path = Path(curve["csv"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            tab = Tabulated.from_csv(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read curve CSV: {exc}") from None
        cfg["curve"] = {"tabulated": {repr(float(t)): float(v) for t, v in zip(tab.times, tab.values)}}
    elif "tabulated" in curve:
        curve["tabulated"] = _canonical_table(curve["tabulated"])
    elif isinstance(curve["theta"], dict):
        curve["theta"]["tabulated"] = _canonical_table(curve["theta"]["tabulated"])
    grid_steps(cfg)
    return cfg


def grid_steps(cfg: dict) -> int:
    n = cfg["grid"]["T"] / cfg["grid"]["dt"]
    if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
        raise ConfigError(f"grid T={cfg['grid']['T']} is not a whole number of steps dt={cfg['grid']['dt']}")
    return int(round(n))


def dumps(cfg: dict) -> str:
    """Canonical one-line JSON, used for every embedded copy."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def _tab(table: dict) -> Tabulated:
    items = _table_items(table)
    return Tabulated(np.array([t for t, _ in items]), np.array([v for _, v in items]))


def build(cfg: dict) -> tuple[ModelParams, Kernel, InputCurve, TimeGrid]:
    m = cfg["model"]
    params = ModelParams(m["lam"], m["nu"], m["rho"], m["s0"])
    kernel = kernel_from_spec(cfg["kernel"])
    grid = TimeGrid(cfg["grid"]["dt"], grid_steps(cfg))
    curve = cfg["curve"]
    if "tabulated" in curve:
        g0 = _tab(curve["tabulated"])
    else:
        theta = curve["theta"]
        g0 = ThetaForm(curve["V0"], _tab(theta["tabulated"]) if isinstance(theta, dict) else float(theta), kernel)
    return params, kernel, g0, grid


def embedded_config(path: Path) -> dict | None:
    """The resolved config stored in an output file, or None if ``path`` is a plain config."""
    data = path.read_bytes()
    if data.startswith(b"# config="):
        return json.loads(data.split(b"\n", 1)[0][len(b"# config="):])
    if data.startswith(b"VHPS"):
        _, _, n_paths, n_steps, _ = struct.unpack_from("<4sIQQd", data)
        marker = struct.calcsize("<4sIQQd") + 16 * n_paths * (n_steps + 1)
        if data[marker:marker + 4] != CONFIG_TRAILER:
            raise ConfigError(f"{path}: path file carries no config trailer")
        (length,) = struct.unpack_from("<Q", data, marker + 4)
        return json.loads(data[marker + 12:marker + 12 + length])
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not JSON ({exc})") from None
    if isinstance(doc, dict) and "schema_version" not in doc and isinstance(doc.get("config"), dict):
        return doc["config"]
    return None


def load(path, seed: int | None = None) -> dict:
    """Read a config file, or the config embedded in an earlier output, and resolve it."""
    path = Path(path)
    try:
        raw = embedded_config(path)
        if raw is None:
            raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return resolve(raw, path.parent, seed)
