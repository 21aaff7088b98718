"""Behavioral constraints as composable overlays.

An overlay guards one feature of a candidate action behind an activation
predicate. When active, it scores the candidate's deviation from the
constraint boundary and admits it only within the overlay's rigidity
tolerance. Three kinds exist:

* prohibitory — exclude candidates whose feature violates an inequality;
* transfer — when active, require the candidate's action class to match
  a preferred class, redirecting generation via forced feedback;
* permissive — when their own condition is met with slack, relax the
  effective tolerance of every overlay sharing one of their tags.

Deviation sign convention: positive means violated by that much,
negative means satisfied with slack. A candidate is admissible under an
active overlay iff deviation <= the effective tolerance.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping

from .conditions import Clause, clause_to_dict, parse_clause
from .errors import ParseError, ValidationError
from .features import FeatureValue

logger = logging.getLogger(__name__)

TIGHTEN_MAPS = ("linear", "quadratic")


class OverlayKind:
    PROHIBITORY = "prohibitory"
    TRANSFER = "transfer"
    PERMISSIVE = "permissive"
    ALL = (PROHIBITORY, TRANSFER, PERMISSIVE)


@dataclass(frozen=True)
class AdaptiveRigidity:
    """Tightens tolerance as a running safety margin shrinks.

    The margin is ``margin_cap - margin_feature`` clamped to
    [0, margin_cap]; the tighten map sends a full margin to the base
    tolerance and a zero margin to zero.
    """

    margin_feature: str
    margin_cap: float
    tighten: str = "linear"

    def __post_init__(self) -> None:
        if self.margin_cap <= 0:
            raise ValueError("margin_cap must be positive")
        if self.tighten not in TIGHTEN_MAPS:
            raise ValueError(f"tighten must be one of {TIGHTEN_MAPS}")

    def margin(self, feature_value: float) -> float:
        return min(self.margin_cap, max(0.0, self.margin_cap - feature_value))

    def effective_epsilon(self, base_epsilon: float, feature_value: float) -> float:
        frac = self.margin(feature_value) / self.margin_cap
        if self.tighten == "quadratic":
            frac = frac * frac
        return base_epsilon * frac


@dataclass(frozen=True)
class RigidityPolicy:
    base_epsilon: float = 0.0
    adaptive: AdaptiveRigidity | None = None

    def __post_init__(self) -> None:
        if self.base_epsilon < 0:
            raise ValueError("base_epsilon must be >= 0")


@dataclass(frozen=True)
class Overlay:
    id: str
    kind: str
    activation: tuple[Clause, ...]  # all must hold; empty = always active
    constraint: Clause
    rigidity: RigidityPolicy
    severity_weight: float = 1.0
    tags: tuple[str, ...] = ()
    transfer_target: str | None = None
    permit_bonus: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in OverlayKind.ALL:
            raise ValueError(f"unknown overlay kind {self.kind!r}")
        if not 0 < self.severity_weight <= 1:
            raise ValueError("severity_weight must be in (0, 1]")
        if (self.transfer_target is not None) != (self.kind == OverlayKind.TRANSFER):
            raise ValueError("transfer_target is set iff kind is transfer")
        if (self.permit_bonus is not None) != (self.kind == OverlayKind.PERMISSIVE):
            raise ValueError("permit_bonus is set iff kind is permissive")
        if self.permit_bonus is not None and not 0 <= self.permit_bonus <= 1:
            raise ValueError("permit_bonus must be in [0, 1]")


@dataclass(frozen=True)
class OverlayVerdict:
    overlay_id: str
    activated: bool
    deviation: float
    admissible: bool
    descriptor: str
    effective_epsilon: float
    confidence: float


_UNEVALUABLE = "unevaluable"


def evaluate(
    overlay: Overlay,
    features: Mapping[str, FeatureValue],
    margin_features: Mapping[str, FeatureValue] | None = None,
) -> OverlayVerdict:
    """Judge one candidate's features against one overlay.

    Total: a missing feature yields a confidence-0 inadmissible verdict
    rather than an exception.
    """
    margin_features = features if margin_features is None else margin_features
    confidences: list[float] = []

    # Activation. A missing activation feature makes the overlay
    # unevaluable; an unsatisfied activation makes it vacuously passed.
    for clause in overlay.activation:
        fv = features.get(clause.name)
        if fv is None:
            return _unevaluable(overlay, f"missing feature {clause.name!r}")
        confidences.append(fv.confidence)
    activated = all(c.holds(features, {}) for c in overlay.activation)
    if not activated:
        return OverlayVerdict(
            overlay_id=overlay.id,
            activated=False,
            deviation=0.0,
            admissible=True,
            descriptor="inactive",
            effective_epsilon=overlay.rigidity.base_epsilon,
            confidence=min(confidences) if confidences else 1.0,
        )

    target = features.get(overlay.constraint.name)
    if target is None:
        return _unevaluable(overlay, f"missing feature {overlay.constraint.name!r}")
    if overlay.kind != OverlayKind.TRANSFER and isinstance(target.value, str):
        return _unevaluable(
            overlay, f"feature {overlay.constraint.name!r} is a label, scalar required"
        )
    confidences.append(target.confidence)

    eff_eps, margin_conf = _effective_epsilon(overlay, margin_features)
    if eff_eps is None:
        return _unevaluable(
            overlay, f"missing margin feature {overlay.rigidity.adaptive.margin_feature!r}"
        )
    if margin_conf is not None:
        confidences.append(margin_conf)

    deviation, descriptor = _deviation(overlay, target)
    admissible = deviation <= eff_eps
    return OverlayVerdict(
        overlay_id=overlay.id,
        activated=True,
        deviation=deviation,
        admissible=admissible,
        descriptor=descriptor,
        effective_epsilon=eff_eps,
        confidence=min(confidences),
    )


def _deviation(overlay: Overlay, target: FeatureValue) -> tuple[float, str]:
    clause = overlay.constraint
    if overlay.kind == OverlayKind.TRANSFER:
        matched = str(target.value) == overlay.transfer_target
        deviation = 0.0 if matched else 1.0
        if matched:
            desc = f"{clause.name} matches preferred class '{overlay.transfer_target}'"
        else:
            desc = (
                f"action class '{target.value}' dispreferred; "
                f"prefer '{overlay.transfer_target}'"
            )
        return deviation, desc
    value = float(target.value)
    threshold = float(clause.value)
    if clause.op in (">=", ">"):
        deviation = threshold - value
        direction = "insufficient" if deviation > 0 else "within tolerance"
    else:
        deviation = value - threshold
        direction = "excessive" if deviation > 0 else "within tolerance"
    return deviation, f"{clause.name} {direction}; deviation={deviation:.2f}"


def _effective_epsilon(
    overlay: Overlay, margin_features: Mapping[str, FeatureValue]
) -> tuple[float | None, float | None]:
    adaptive = overlay.rigidity.adaptive
    if adaptive is None:
        return overlay.rigidity.base_epsilon, None
    fv = margin_features.get(adaptive.margin_feature)
    if fv is None or isinstance(fv.value, str):
        return None, None
    return (
        adaptive.effective_epsilon(overlay.rigidity.base_epsilon, float(fv.value)),
        fv.confidence,
    )


def _unevaluable(overlay: Overlay, why: str) -> OverlayVerdict:
    return OverlayVerdict(
        overlay_id=overlay.id,
        activated=True,
        deviation=1.0,
        admissible=False,
        descriptor=f"{_UNEVALUABLE}: {why}",
        effective_epsilon=overlay.rigidity.base_epsilon,
        confidence=0.0,
    )


def evaluate_pack(
    overlays: list[Overlay],
    features: Mapping[str, FeatureValue],
    margin_features: Mapping[str, FeatureValue] | None = None,
    *,
    permissive_relaxation: bool = True,
) -> tuple[OverlayVerdict, ...]:
    """Evaluate a whole overlay set on one candidate, composing kinds.

    A permissive overlay whose own condition holds with slack adds its
    bonus to the effective tolerance of every *other* overlay sharing at
    least one tag, and the affected verdicts are re-derived. Setting
    ``permissive_relaxation=False`` is the conservative mode in which
    prohibitions always win and bonuses are ignored.
    """
    verdicts = [evaluate(ov, features, margin_features) for ov in overlays]
    if not permissive_relaxation:
        return tuple(verdicts)

    bonus_by_id: dict[str, float] = {}
    for ov, verdict in zip(overlays, verdicts):
        if ov.kind != OverlayKind.PERMISSIVE or ov.permit_bonus is None:
            continue
        if not (verdict.activated and verdict.deviation <= 0):
            continue
        for other in overlays:
            if other.id == ov.id:
                continue
            if set(other.tags) & set(ov.tags):
                bonus_by_id[other.id] = bonus_by_id.get(other.id, 0.0) + ov.permit_bonus

    if not bonus_by_id:
        return tuple(verdicts)

    relaxed: list[OverlayVerdict] = []
    for verdict in verdicts:
        bonus = bonus_by_id.get(verdict.overlay_id)
        if bonus is None or not verdict.activated or verdict.confidence == 0.0:
            relaxed.append(verdict)
            continue
        eff = verdict.effective_epsilon + bonus
        relaxed.append(
            OverlayVerdict(
                overlay_id=verdict.overlay_id,
                activated=verdict.activated,
                deviation=verdict.deviation,
                admissible=verdict.deviation <= eff,
                descriptor=verdict.descriptor,
                effective_epsilon=eff,
                confidence=verdict.confidence,
            )
        )
    return tuple(relaxed)


# -- config parsing -------------------------------------------------------


def parse_overlay_set(config_text: str, feature_names: set[str]) -> list[Overlay]:
    """Parse and validate a JSON overlay pack.

    The document is either a list of overlay objects or an object with
    an ``overlays`` list (and optional ``pack_id``). An empty document
    is an empty pack.
    """
    if not config_text.strip():
        return []
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from exc

    if isinstance(doc, dict):
        raw_list = doc.get("overlays", [])
    elif isinstance(doc, list):
        raw_list = doc
    else:
        raise ValidationError("<document>", "expected a list or an object with 'overlays'")
    if not isinstance(raw_list, list):
        raise ValidationError("<document>", "'overlays' must be a list")

    overlays: list[Overlay] = []
    seen: set[str] = set()
    for idx, raw in enumerate(raw_list):
        overlay = _parse_overlay(raw, idx, feature_names)
        if overlay.id in seen:
            raise ValidationError(overlay.id, "duplicate overlay id")
        seen.add(overlay.id)
        overlays.append(overlay)
    return overlays


def _parse_overlay(raw: object, index: int, feature_names: set[str]) -> Overlay:
    position = f"overlay[{index}]"
    if not isinstance(raw, dict):
        raise ValidationError(position, "overlay must be an object")
    overlay_id = raw.get("id")
    if not isinstance(overlay_id, str) or not overlay_id:
        raise ValidationError(position, "overlay needs a non-empty string 'id'")
    position = overlay_id

    kind = raw.get("kind")
    if kind not in OverlayKind.ALL:
        raise ValidationError(position, f"kind must be one of {OverlayKind.ALL}, got {kind!r}")

    activation_raw = raw.get("activation")
    activation: tuple[Clause, ...] = ()
    if activation_raw is not None:
        clauses = activation_raw if isinstance(activation_raw, list) else [activation_raw]
        activation = tuple(parse_clause(c, position) for c in clauses)
    for clause in activation:
        if clause.kind != "feature":
            raise ValidationError(position, "overlay activation must guard features")
        if clause.name not in feature_names:
            raise ValidationError(position, f"unknown feature {clause.name!r}")
        _check_unit_threshold(clause, position)

    constraint_raw = raw.get("constraint")
    if constraint_raw is None:
        raise ValidationError(position, "overlay needs a 'constraint'")
    constraint = parse_clause(constraint_raw, position)
    if constraint.kind != "feature":
        raise ValidationError(position, "overlay constraint must target a feature")
    if constraint.name not in feature_names:
        raise ValidationError(position, f"unknown feature {constraint.name!r}")

    transfer_target = raw.get("transfer_target")
    permit_bonus = raw.get("permit_bonus")
    if kind == OverlayKind.TRANSFER:
        if not isinstance(transfer_target, str) or not transfer_target:
            raise ValidationError(position, "transfer overlays need 'transfer_target'")
        if constraint.op != "==":
            raise ValidationError(position, "transfer constraints use op '=='")
    else:
        if transfer_target is not None:
            raise ValidationError(position, "'transfer_target' is transfer-only")
        if constraint.op not in (">=", "<="):
            raise ValidationError(position, "constraint op must be '>=' or '<='")
        _check_unit_threshold(constraint, position)
    if kind == OverlayKind.PERMISSIVE:
        if not isinstance(permit_bonus, (int, float)) or isinstance(permit_bonus, bool):
            raise ValidationError(position, "permissive overlays need numeric 'permit_bonus'")
        if not 0 <= permit_bonus <= 1:
            raise ValidationError(position, "permit_bonus must be in [0, 1]")
    elif permit_bonus is not None:
        raise ValidationError(position, "'permit_bonus' is permissive-only")

    rigidity = _parse_rigidity(raw.get("rigidity"), position, feature_names)

    weight = raw.get("weight", 1.0)
    if not isinstance(weight, (int, float)) or isinstance(weight, bool) or not 0 < weight <= 1:
        raise ValidationError(position, "weight must be a number in (0, 1]")

    tags_raw = raw.get("tags", [])
    if not isinstance(tags_raw, list) or any(not isinstance(t, str) for t in tags_raw):
        raise ValidationError(position, "tags must be a list of strings")

    try:
        return Overlay(
            id=overlay_id,
            kind=kind,
            activation=activation,
            constraint=constraint,
            rigidity=rigidity,
            severity_weight=float(weight),
            tags=tuple(tags_raw),
            transfer_target=transfer_target if kind == OverlayKind.TRANSFER else None,
            permit_bonus=float(permit_bonus) if kind == OverlayKind.PERMISSIVE else None,
        )
    except ValueError as exc:
        raise ValidationError(position, str(exc)) from exc


def _check_unit_threshold(clause: Clause, position: str) -> None:
    if isinstance(clause.value, float) and not 0.0 <= clause.value <= 1.0:
        raise ValidationError(position, f"threshold for {clause.name!r} must be in [0, 1]")


def _parse_rigidity(raw: object, position: str, feature_names: set[str]) -> RigidityPolicy:
    if raw is None:
        return RigidityPolicy(0.0)
    if not isinstance(raw, dict):
        raise ValidationError(position, "rigidity must be an object")
    epsilon = raw.get("epsilon", 0.0)
    if not isinstance(epsilon, (int, float)) or isinstance(epsilon, bool) or epsilon < 0:
        raise ValidationError(position, "rigidity.epsilon must be a number >= 0")
    adaptive_raw = raw.get("adaptive")
    adaptive = None
    if adaptive_raw is not None:
        if not isinstance(adaptive_raw, dict):
            raise ValidationError(position, "rigidity.adaptive must be an object")
        margin_feature = adaptive_raw.get("margin_feature")
        if not isinstance(margin_feature, str) or margin_feature not in feature_names:
            raise ValidationError(position, f"unknown margin feature {margin_feature!r}")
        margin_cap = adaptive_raw.get("margin_cap")
        if not isinstance(margin_cap, (int, float)) or isinstance(margin_cap, bool) or margin_cap <= 0:
            raise ValidationError(position, "margin_cap must be a positive number")
        tighten = adaptive_raw.get("tighten", "linear")
        if tighten not in TIGHTEN_MAPS:
            raise ValidationError(position, f"tighten must be one of {TIGHTEN_MAPS}")
        adaptive = AdaptiveRigidity(margin_feature, float(margin_cap), tighten)
    return RigidityPolicy(float(epsilon), adaptive)


def serialize_overlay_set(overlays: list[Overlay], pack_id: str | None = None) -> str:
    """Inverse of ``parse_overlay_set`` up to structural equality."""
    out = []
    for ov in overlays:
        raw: dict = {
            "id": ov.id,
            "kind": ov.kind,
            "activation": [clause_to_dict(c) for c in ov.activation] or None,
            "constraint": clause_to_dict(ov.constraint),
            "rigidity": _rigidity_to_dict(ov.rigidity),
            "weight": ov.severity_weight,
        }
        if ov.tags:
            raw["tags"] = list(ov.tags)
        if ov.transfer_target is not None:
            raw["transfer_target"] = ov.transfer_target
        if ov.permit_bonus is not None:
            raw["permit_bonus"] = ov.permit_bonus
        out.append(raw)
    doc: dict = {"overlays": out}
    if pack_id is not None:
        doc = {"pack_id": pack_id, "overlays": out}
    return json.dumps(doc, indent=2)


def _rigidity_to_dict(rigidity: RigidityPolicy) -> dict:
    raw: dict = {"epsilon": rigidity.base_epsilon}
    if rigidity.adaptive is not None:
        raw["adaptive"] = {
            "margin_feature": rigidity.adaptive.margin_feature,
            "margin_cap": rigidity.adaptive.margin_cap,
            "tighten": rigidity.adaptive.tighten,
        }
    return raw
