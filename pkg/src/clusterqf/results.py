"""The JSON result schema shared by the CLI subcommands."""

from __future__ import annotations

import json
import math

from .errors import ValidationError

SCHEMA_VERSION = "1"

_REQUIRED = {
    "schema_version": str,
    "theta_hat": (int, float),
    "omega2_l3co": (int, float, type(None)),
    "omega2_l3co_nonneg": (int, float, type(None)),
    "omega2_l2co": (int, float, type(None)),
    "t": (int, float),
    "p": (int, float),
    "ci": list,
    "theta0": (int, float),
    "alpha": (int, float),
    "diagnostics": dict,
    "timing": dict,
    "warnings": list,
}


def build_result(theta_hat: float, test, omega2: dict, theta0: float,
                 diagnostics: dict, timing: dict, warnings: list) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "theta_hat": float(theta_hat),
        "omega2_l3co": omega2.get("l3co"),
        "omega2_l3co_nonneg": omega2.get("l3co_nonneg"),
        "omega2_l2co": omega2.get("l2co"),
        "t": test.t_stat,
        "p": test.p_value,
        "ci": [test.ci[0], test.ci[1]],
        "theta0": float(theta0),
        "alpha": test.alpha,
        "reject": test.reject,
        "diagnostics": diagnostics,
        "timing": timing,
        "warnings": list(warnings) + list(test.flags),
    }
    validate_result(out)
    return out


def validate_result(obj: dict) -> None:
    """Check the result dict against the pinned schema; raise on mismatch."""
    for key, types in _REQUIRED.items():
        if key not in obj:
            raise ValidationError(f"result is missing required field {key!r}")
        if not isinstance(obj[key], types):
            raise ValidationError(
                f"result field {key!r} has type {type(obj[key]).__name__}")
    if obj["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported schema version {obj['schema_version']!r}")
    if len(obj["ci"]) != 2:
        raise ValidationError("ci must be a [lo, hi] pair")
    if not (isinstance(obj["p"], (int, float)) and
            (math.isnan(obj["p"]) or 0.0 <= obj["p"] <= 1.0)):
        raise ValidationError("p must lie in [0, 1]")


def dump_result(obj: dict, fh) -> None:
    validate_result(obj)
    json.dump(obj, fh, indent=2, sort_keys=True, default=_coerce)
    fh.write("\n")


def _coerce(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)
