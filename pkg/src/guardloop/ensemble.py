"""Ensembles of observers and arbitration over their judgments.

Each member observer judges the same candidate list under its own
overlay pack and thresholds; an arbitration rule combines the member
admissible sets into a joint one. Disagreement (member sets not all
equal) is a risk signal routed to a configured conservative action.

Overlay hot-swap lives here too: user feedback is applied as a
temporary or persistent overlay-set update without touching the base
policy.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, replace
from typing import Sequence

from .errors import ValidationError
from .observer import AdmissibleSet, ObserverLimits, RejectionReason
from .overlays import (
    Overlay,
    RigidityPolicy,
    parse_overlay_set,
    serialize_overlay_set,
)

logger = logging.getLogger(__name__)


class ArbitrationKind:
    CONSERVATIVE_INTERSECTION = "conservative_intersection"
    MAJORITY_VOTE = "majority_vote"
    WEIGHTED_SCORE = "weighted_score"
    ALL = (CONSERVATIVE_INTERSECTION, MAJORITY_VOTE, WEIGHTED_SCORE)


class DisagreementKind:
    DEFER = "defer"
    FALLBACK = "fallback"
    ASK_CLARIFY = "ask_clarify"
    ALL = (DEFER, FALLBACK, ASK_CLARIFY)


@dataclass(frozen=True)
class DisagreementAction:
    kind: str
    fallback_id: str | None = None
    clarify_template: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in DisagreementKind.ALL:
            raise ValueError(f"unknown disagreement action {self.kind!r}")
        if self.kind == DisagreementKind.FALLBACK and not self.fallback_id:
            raise ValueError("fallback disagreement action needs a fallback id")
        if self.kind == DisagreementKind.ASK_CLARIFY and not self.clarify_template:
            raise ValueError("ask_clarify disagreement action needs a template")


@dataclass(frozen=True)
class ArbitrationRule:
    kind: str
    weights: tuple[float, ...] | None = None
    pass_threshold: float = 0.5
    disagreement_action: DisagreementAction = DisagreementAction(DisagreementKind.DEFER)

    def __post_init__(self) -> None:
        if self.kind not in ArbitrationKind.ALL:
            raise ValueError(f"unknown arbitration kind {self.kind!r}")
        if self.kind == ArbitrationKind.WEIGHTED_SCORE:
            if not self.weights:
                raise ValueError("weighted_score needs weights")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("weights must sum to 1")


def arbitrate(
    per_observer: Sequence[tuple[AdmissibleSet, RejectionReason | None]],
    rule: ArbitrationRule,
) -> tuple[tuple[int, ...], bool]:
    """Combine member judgments over one shared candidate list.

    Returns the joint admissible indices and whether the member sets
    disagreed (set-level inequality, the strictest observable form).
    """
    if not per_observer:
        raise ValueError("arbitrate needs at least one observer judgment")
    n_candidates = len(per_observer[0][0].candidates)
    member_sets = [frozenset(adm.admissible_indices) for adm, _ in per_observer]
    for adm, _ in per_observer:
        if len(adm.candidates) != n_candidates:
            raise ValueError("all observers must judge the same candidate list")

    disagreement = any(s != member_sets[0] for s in member_sets[1:])

    if rule.kind == ArbitrationKind.CONSERVATIVE_INTERSECTION:
        joint = set(member_sets[0])
        for s in member_sets[1:]:
            joint &= s
    elif rule.kind == ArbitrationKind.MAJORITY_VOTE:
        joint = {
            i
            for i in range(n_candidates)
            if sum(1 for s in member_sets if i in s) > len(member_sets) / 2
        }
    else:
        weights = rule.weights or ()
        if len(weights) != len(member_sets):
            raise ValueError("one weight per observer required")
        joint = {
            i
            for i in range(n_candidates)
            if sum(w for w, s in zip(weights, member_sets) if i in s)
            >= rule.pass_threshold
        }
    return tuple(sorted(joint)), disagreement


# -- overlay hot-swap -------------------------------------------------------


@dataclass(frozen=True)
class OverlayUpdate:
    """One teachability edit to an overlay set."""

    op: str  # add | remove | set_epsilon | set_threshold
    overlay_id: str | None = None
    overlay_json: str | None = None
    value: float | None = None

    def __post_init__(self) -> None:
        if self.op not in ("add", "remove", "set_epsilon", "set_threshold"):
            raise ValueError(f"unknown overlay update op {self.op!r}")


def apply_overlay_update(
    overlays: list[Overlay],
    update: OverlayUpdate,
    feature_names: set[str],
    *,
    persist_path: str | None = None,
    pack_id: str | None = None,
) -> list[Overlay]:
    """Return the updated overlay set; optionally rewrite the config.

    Session-temporary scope is the default: the caller keeps the
    returned list for the session. Passing ``persist_path`` makes the
    update persistent by atomically rewriting the pack file.
    """
    updated = _apply(overlays, update, feature_names)
    if persist_path is not None:
        _atomic_write(persist_path, serialize_overlay_set(updated, pack_id))
    return updated


def _apply(
    overlays: list[Overlay], update: OverlayUpdate, feature_names: set[str]
) -> list[Overlay]:
    if update.op == "add":
        if not update.overlay_json:
            raise ValidationError("<update>", "add needs overlay_json")
        added = parse_overlay_set(update.overlay_json, feature_names)
        existing = {ov.id for ov in overlays}
        for ov in added:
            if ov.id in existing:
                raise ValidationError(ov.id, "overlay id already present")
        return overlays + added

    if update.overlay_id is None:
        raise ValidationError("<update>", f"{update.op} needs overlay_id")
    index = next((i for i, ov in enumerate(overlays) if ov.id == update.overlay_id), None)
    if index is None:
        raise ValidationError(update.overlay_id, "no such overlay")

    if update.op == "remove":
        return overlays[:index] + overlays[index + 1:]

    if update.value is None or update.value < 0:
        raise ValidationError(update.overlay_id, f"{update.op} needs a value >= 0")
    target = overlays[index]
    if update.op == "set_epsilon":
        new = replace(
            target,
            rigidity=RigidityPolicy(float(update.value), target.rigidity.adaptive),
        )
    else:
        if not 0.0 <= update.value <= 1.0:
            raise ValidationError(update.overlay_id, "threshold must be in [0, 1]")
        new = replace(target, constraint=replace(target.constraint, value=float(update.value)))
    return overlays[:index] + [new] + overlays[index + 1:]


def _atomic_write(path: str, content: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_arbitration_rule(raw: object) -> ArbitrationRule:
    """Parse the ensemble config's rule and disagreement action block."""
    if not isinstance(raw, dict):
        raise ValidationError("<ensemble>", "rule must be an object")
    kind = raw.get("kind")
    if kind not in ArbitrationKind.ALL:
        raise ValidationError("<ensemble>", f"rule kind must be one of {ArbitrationKind.ALL}")
    weights_raw = raw.get("weights")
    weights = None
    if weights_raw is not None:
        if not isinstance(weights_raw, list) or not all(
            isinstance(w, (int, float)) and not isinstance(w, bool) for w in weights_raw
        ):
            raise ValidationError("<ensemble>", "weights must be a list of numbers")
        weights = tuple(float(w) for w in weights_raw)
    pass_threshold = raw.get("pass_threshold", 0.5)
    if not isinstance(pass_threshold, (int, float)) or isinstance(pass_threshold, bool):
        raise ValidationError("<ensemble>", "pass_threshold must be a number")

    action_raw = raw.get("disagreement_action", {"kind": "defer"})
    if not isinstance(action_raw, dict) or action_raw.get("kind") not in DisagreementKind.ALL:
        raise ValidationError(
            "<ensemble>", f"disagreement_action kind must be one of {DisagreementKind.ALL}"
        )
    action = DisagreementAction(
        kind=action_raw["kind"],
        fallback_id=action_raw.get("id"),
        clarify_template=action_raw.get("template"),
    )
    try:
        return ArbitrationRule(
            kind=kind,
            weights=weights,
            pass_threshold=float(pass_threshold),
            disagreement_action=action,
        )
    except ValueError as exc:
        raise ValidationError("<ensemble>", str(exc)) from exc
