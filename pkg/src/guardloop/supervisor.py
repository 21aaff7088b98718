"""Hierarchical oversight: engagement gating and activity-mode selection.

Above utterance-level judgment sits a supervisor that (a) can veto any
engagement at all when the scene is inappropriate, and (b) selects which
activity mode — and therefore which overlay pack and policy profile —
governs the turn. Mode switches are themselves routed through the
observer as candidate actions, so high-level transitions face the same
enforcement machinery as utterances.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping

from .conditions import Clause, clause_to_dict, parse_clause, validate_feature_names
from .errors import ParseError, ValidationError
from .features import FeatureValue

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mode:
    id: str
    overlay_pack: str
    policy_profile: str
    entry_condition: tuple[Clause, ...] = ()
    exit_condition: tuple[Clause, ...] = ()
    max_duration_turns: int | None = None


@dataclass(frozen=True)
class GatePredicate:
    id: str
    clauses: tuple[Clause, ...]  # all must hold for the gate to fire


@dataclass(frozen=True)
class SupervisorConfig:
    modes: tuple[Mode, ...]
    initial_mode: str
    gating: tuple[GatePredicate, ...] = ()

    def __post_init__(self) -> None:
        ids = [m.id for m in self.modes]
        if len(set(ids)) != len(ids):
            raise ValidationError("<supervisor>", "duplicate mode ids")
        if self.initial_mode not in ids:
            raise ValidationError(self.initial_mode, "initial_mode is not a configured mode")

    def mode(self, mode_id: str) -> Mode:
        for m in self.modes:
            if m.id == mode_id:
                return m
        raise KeyError(mode_id)


@dataclass(frozen=True)
class GateDecision:
    engage: bool
    reason: str | None = None  # names the gating predicate on skip


def gate(
    state_features: Mapping[str, FeatureValue],
    counters: Mapping[str, float],
    config: SupervisorConfig,
) -> GateDecision:
    """Skip iff any gating predicate holds; a skip names the predicate."""
    for predicate in config.gating:
        if predicate.clauses and all(c.holds(state_features, counters) for c in predicate.clauses):
            return GateDecision(engage=False, reason=predicate.id)
    return GateDecision(engage=True)


def select_mode(
    current_mode: str,
    turns_in_mode: float,
    state_features: Mapping[str, FeatureValue],
    counters: Mapping[str, float],
    config: SupervisorConfig,
) -> str:
    """Return the mode that should govern this turn.

    The current mode is left only when its exit condition holds or its
    duration budget is exceeded; the replacement is the first mode in
    config order whose entry condition holds. With no eligible target
    the supervisor stays put and logs a warning.
    """
    mode = config.mode(current_mode)
    exit_now = bool(mode.exit_condition) and all(
        c.holds(state_features, counters) for c in mode.exit_condition
    )
    if mode.max_duration_turns is not None and turns_in_mode >= mode.max_duration_turns:
        exit_now = True
    if not exit_now:
        return current_mode
    for target in config.modes:
        if target.id == current_mode:
            continue
        if target.entry_condition and all(
            c.holds(state_features, counters) for c in target.entry_condition
        ):
            return target.id
    logger.warning(
        "mode %r wants to exit but no entry condition holds; remaining", current_mode
    )
    return current_mode


# -- config parsing ---------------------------------------------------------


def parse_supervisor_config(config_text: str, feature_names: set[str]) -> SupervisorConfig:
    """Parse ``{"modes": [...], "initial_mode": ..., "gating": [...]}``.

    Entry/exit conditions of each mode are checked for joint
    satisfiability on shared scalar features (interval analysis); an
    overlap draws a load warning, not an error.
    """
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from exc
    if not isinstance(doc, dict):
        raise ValidationError("<document>", "supervisor config must be an object")

    modes_raw = doc.get("modes")
    if not isinstance(modes_raw, list) or not modes_raw:
        raise ValidationError("<document>", "supervisor config needs a non-empty 'modes' list")

    modes: list[Mode] = []
    for idx, raw in enumerate(modes_raw):
        position = f"mode[{idx}]"
        if not isinstance(raw, dict):
            raise ValidationError(position, "mode must be an object")
        mode_id = raw.get("id")
        if not isinstance(mode_id, str) or not mode_id:
            raise ValidationError(position, "mode needs a non-empty 'id'")
        pack = raw.get("overlay_pack")
        if not isinstance(pack, str) or not pack:
            raise ValidationError(mode_id, "mode needs an 'overlay_pack' id")
        profile = raw.get("policy_profile", mode_id)
        if not isinstance(profile, str):
            raise ValidationError(mode_id, "'policy_profile' must be a string")
        entry = _parse_condition_list(raw.get("entry_condition"), mode_id, feature_names)
        exit_ = _parse_condition_list(raw.get("exit_condition"), mode_id, feature_names)
        max_duration = raw.get("max_duration_turns")
        if max_duration is not None and (
            not isinstance(max_duration, int) or isinstance(max_duration, bool) or max_duration < 1
        ):
            raise ValidationError(mode_id, "'max_duration_turns' must be a positive integer")
        _warn_on_overlap(mode_id, entry, exit_)
        modes.append(Mode(mode_id, pack, profile, entry, exit_, max_duration))

    initial = doc.get("initial_mode")
    if not isinstance(initial, str):
        raise ValidationError("<document>", "supervisor config needs 'initial_mode'")

    gating: list[GatePredicate] = []
    gating_raw = doc.get("gating", [])
    if not isinstance(gating_raw, list):
        raise ValidationError("<document>", "'gating' must be a list")
    for idx, raw in enumerate(gating_raw):
        position = f"gating[{idx}]"
        if not isinstance(raw, dict):
            raise ValidationError(position, "gating predicate must be an object")
        pred_id = raw.get("id")
        if not isinstance(pred_id, str) or not pred_id:
            raise ValidationError(position, "gating predicate needs an 'id'")
        clauses = _parse_condition_list(raw.get("all"), pred_id, feature_names)
        if not clauses:
            raise ValidationError(pred_id, "gating predicate needs a non-empty 'all' list")
        gating.append(GatePredicate(pred_id, clauses))

    return SupervisorConfig(tuple(modes), initial, tuple(gating))


def _parse_condition_list(
    raw: object, position: str, feature_names: set[str]
) -> tuple[Clause, ...]:
    if raw is None:
        return ()
    items = raw if isinstance(raw, list) else [raw]
    clauses = tuple(parse_clause(item, position) for item in items)
    validate_feature_names(list(clauses), feature_names, position)
    return clauses


def _warn_on_overlap(
    mode_id: str, entry: tuple[Clause, ...], exit_: tuple[Clause, ...]
) -> None:
    """Interval analysis on shared scalar names: if some valuation can
    satisfy both entry and exit simultaneously, warn."""
    if not entry or not exit_:
        return
    shared = {c.name for c in entry} & {c.name for c in exit_}
    for name in shared:
        e_lo, e_hi = _interval([c for c in entry if c.name == name])
        x_lo, x_hi = _interval([c for c in exit_ if c.name == name])
        if e_lo is None or x_lo is None:
            continue  # label constraints; no interval form
        if max(e_lo, x_lo) <= min(e_hi, x_hi):
            logger.warning(
                "mode %r: entry and exit conditions on %r overlap "
                "(hysteresis not guaranteed)",
                mode_id,
                name,
            )


def _interval(clauses: list[Clause]) -> tuple[float | None, float | None]:
    lo, hi = float("-inf"), float("inf")
    for c in clauses:
        if isinstance(c.value, str):
            return None, None
        v = float(c.value)
        if c.op in (">=", ">"):
            lo = max(lo, v)
        elif c.op in ("<=", "<"):
            hi = min(hi, v)
        elif c.op == "==":
            lo, hi = max(lo, v), min(hi, v)
    return lo, hi


def serialize_supervisor_config(config: SupervisorConfig) -> str:
    modes = []
    for m in config.modes:
        raw: dict = {
            "id": m.id,
            "overlay_pack": m.overlay_pack,
            "policy_profile": m.policy_profile,
            "entry_condition": [clause_to_dict(c) for c in m.entry_condition],
            "exit_condition": [clause_to_dict(c) for c in m.exit_condition],
        }
        if m.max_duration_turns is not None:
            raw["max_duration_turns"] = m.max_duration_turns
        modes.append(raw)
    return json.dumps(
        {
            "modes": modes,
            "initial_mode": config.initial_mode,
            "gating": [
                {"id": g.id, "all": [clause_to_dict(c) for c in g.clauses]}
                for g in config.gating
            ],
        },
        indent=2,
    )
