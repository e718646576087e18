"""Run configuration loading and validation against the published JSON schema.

The schema ships with the package (``schemas/run_config.schema.json``) and is
enforced by a small validator covering the subset it uses: typed objects with
required keys, rejected unknown keys, arrays, enums, and numeric minimums.
"""

from __future__ import annotations

import json
from importlib import resources

from .errors import ValidationError
from .runner import OptimizerSpec

_SCHEMA = None


def load_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("kronfisher").joinpath("schemas/run_config.schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "integer": int,
    "number": (int, float),
}


def _resolve(node: dict, root: dict) -> dict:
    if "$ref" in node:
        ref = node["$ref"]
        if not ref.startswith("#/"):
            raise ValidationError(f"unsupported $ref {ref!r}")
        target = root
        for part in ref[2:].split("/"):
            target = target[part]
        return target
    return node


def _check(instance, node: dict, root: dict, path: str):
    node = _resolve(node, root)
    expected = node.get("type")
    if expected is not None:
        types = expected if isinstance(expected, list) else [expected]
        ok = False
        for t in types:
            pytype = _TYPES[t]
            if isinstance(instance, pytype) and not (
                t in ("integer", "number") and isinstance(instance, bool)
            ):
                if t == "integer" and isinstance(instance, float):
                    continue
                ok = True
                break
        if not ok:
            raise ValidationError(f"{path}: expected {expected}, got {type(instance).__name__}")
    if "enum" in node and instance not in node["enum"]:
        raise ValidationError(f"{path}: {instance!r} not one of {node['enum']}")
    if "minimum" in node and isinstance(instance, (int, float)) and instance < node["minimum"]:
        raise ValidationError(f"{path}: {instance} below minimum {node['minimum']}")
    if isinstance(instance, dict):
        props = node.get("properties", {})
        if not node.get("additionalProperties", True):
            unknown = set(instance) - set(props)
            if unknown:
                raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
        for key in node.get("required", []):
            if key not in instance:
                raise ValidationError(f"{path}: missing required key {key!r}")
        for key, value in instance.items():
            if key in props:
                _check(value, props[key], root, f"{path}.{key}")
    if isinstance(instance, list) and "items" in node:
        for i, item in enumerate(instance):
            _check(item, node["items"], root, f"{path}[{i}]")


def validate_config(config: dict) -> dict:
    """Validate a config dict; raises ValidationError with a path on failure."""
    if not isinstance(config, dict):
        raise ValidationError("config root must be a JSON object")
    schema = load_schema()
    _check(config, schema, schema, "$")
    return config


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
    return validate_config(config)


def optimizer_from_spec(spec: dict | None) -> OptimizerSpec:
    spec = spec or {}
    return OptimizerSpec(
        name=spec.get("name", "adafisher"),
        alpha=float(spec.get("alpha", 0.001)),
        beta=float(spec.get("beta", 0.9)),
        gamma=float(spec.get("gamma", 0.8)),
        lam=float(spec.get("lambda", 0.001)),
        kappa=float(spec.get("kappa", 0.0005)),
        eps=float(spec.get("eps", 1e-8)),
        beta2=float(spec.get("beta2", 0.999)),
    )
