"""Predicate clauses over features and counters.

One clause compares a single feature value or trajectory counter against
a threshold. Overlay activations, fallback conditions, supervisor
gating, and mode entry/exit conditions all share this form, so configs
stay uniform and the evaluator stays in one place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, TYPE_CHECKING

from .errors import ValidationError

if TYPE_CHECKING:
    from .features import FeatureValue

OPS = (">=", "<=", ">", "<", "==", "!=")


@dataclass(frozen=True)
class Clause:
    """``<feature|counter> <op> <value>``."""

    kind: str  # "feature" | "counter"
    name: str
    op: str
    value: float | str

    def __post_init__(self) -> None:
        if self.kind not in ("feature", "counter"):
            raise ValueError(f"unknown clause kind {self.kind!r}")
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")

    def holds(
        self,
        features: Mapping[str, "FeatureValue"],
        counters: Mapping[str, float],
    ) -> bool:
        """Evaluate against the given maps. A missing feature is False
        (unevaluable); a missing counter reads as 0 (counters are counts
        that simply have not started yet)."""
        if self.kind == "counter":
            actual: float | str = counters.get(self.name, 0.0)
        else:
            fv = features.get(self.name)
            if fv is None:
                return False
            actual = fv.value
        return compare(actual, self.op, self.value)


def compare(actual: float | str, op: str, expected: float | str) -> bool:
    if isinstance(actual, str) or isinstance(expected, str):
        if op == "==":
            return actual == expected
        if op == "!=":
            return actual != expected
        return False  # ordered ops are undefined on labels
    if op == ">=":
        return actual >= expected
    if op == "<=":
        return actual <= expected
    if op == ">":
        return actual > expected
    if op == "<":
        return actual < expected
    if op == "==":
        return actual == expected
    return actual != expected


def parse_clause(raw: object, position: str) -> Clause:
    """Parse ``{"feature"|"counter": name, "op": op, "value": v}``.

    Overlay configs use ``threshold`` as an alias for ``value``.
    """
    if not isinstance(raw, dict):
        raise ValidationError(position, f"condition must be an object, got {type(raw).__name__}")
    if "feature" in raw and "counter" in raw:
        raise ValidationError(position, "condition names both a feature and a counter")
    if "feature" in raw:
        kind, name = "feature", raw["feature"]
    elif "counter" in raw:
        kind, name = "counter", raw["counter"]
    else:
        raise ValidationError(position, "condition needs a 'feature' or 'counter' key")
    if not isinstance(name, str) or not name:
        raise ValidationError(position, "condition name must be a non-empty string")
    op = raw.get("op")
    if op not in OPS:
        raise ValidationError(position, f"condition op must be one of {OPS}, got {op!r}")
    value = raw.get("value", raw.get("threshold"))
    if not isinstance(value, (int, float, str)) or isinstance(value, bool):
        raise ValidationError(position, "condition value must be a number or label")
    if isinstance(value, (int, float)):
        value = float(value)
    return Clause(kind=kind, name=name, op=op, value=value)


def clause_to_dict(clause: Clause) -> dict:
    key = "feature" if clause.kind == "feature" else "counter"
    return {key: clause.name, "op": clause.op, "value": clause.value}


def validate_feature_names(
    clauses: list[Clause], feature_names: set[str], position: str
) -> None:
    """Reject clauses referencing features absent from the registry.

    Counter names are dynamic (tag-derived) and validated only for
    non-emptiness at parse time.
    """
    for clause in clauses:
        if clause.kind == "feature" and clause.name not in feature_names:
            raise ValidationError(
                position, f"unknown feature {clause.name!r} (not in extractor registry)"
            )
