"""Dynamical-system core: states, actions, transitions, trajectories.

An interaction is modeled as a discrete-time system. The state carries
the full turn history plus derived counters; agent actions advance it
through ``apply_transition``. Everything here is an immutable value:
transitions return new states, so sessions can replay deterministically
and run in parallel without shared mutable state.

Counter semantics
-----------------
``consecutive_rejections``
    +1 when the executed action came from the fallback library or was a
    supervisor-issued silence (a deferral); unchanged on mode switches;
    reset to 0 by any other executed agent action.
``regeneration_count_this_turn``
    bumped by the observer while it retries within a turn; reset to 0 at
    every turn boundary (i.e. by ``apply_transition``).
``consecutive_<tag>``
    for every plain exogenous tag (no ``:``), +1 per transition while the
    tag is present, reset to 0 when it disappears. Scenarios use these to
    model externally observed streaks (fixation, refusal, ...).
``turns_in_mode``
    +1 per agent action, reset to 0 when a mode switch executes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, TYPE_CHECKING

if TYPE_CHECKING:
    from .features import FeatureValue


class Speaker(str, Enum):
    USER = "user"
    AGENT = "agent"


class ActionKind(str, Enum):
    UTTERANCE = "utterance"
    MODE_SWITCH = "mode_switch"
    SILENCE = "silence"
    DEFER = "defer"
    FALLBACK_REF = "fallback_ref"


class ActionSource(str, Enum):
    BASE_POLICY = "base_policy"
    FALLBACK_LIBRARY = "fallback_library"
    SUPERVISOR = "supervisor"


#: Counters present in every fresh state.
INITIAL_COUNTERS = (
    "consecutive_rejections",
    "consecutive_critical_corrections",
    "regeneration_count_this_turn",
    "turns_in_mode",
)


@dataclass(frozen=True)
class Turn:
    """One history entry. Timestamps are integer milliseconds and must be
    supplied deterministically by the caller (the harness uses logical
    clocks so reruns are byte-identical)."""

    role: Speaker
    text: str
    timestamp_ms: int


@dataclass(frozen=True)
class CandidateAction:
    """A proposed action awaiting admissibility judgment."""

    content: str
    kind: ActionKind = ActionKind.UTTERANCE
    generation_attempt: int = 0
    source: ActionSource = ActionSource.BASE_POLICY
    mode_target: str | None = None
    fallback_id: str | None = None

    def __post_init__(self) -> None:
        if self.generation_attempt < 0:
            raise ValueError("generation_attempt must be non-negative")
        if self.kind is ActionKind.MODE_SWITCH and not self.mode_target:
            raise ValueError("mode_switch actions require mode_target")
        if self.kind is ActionKind.FALLBACK_REF and not self.fallback_id:
            raise ValueError("fallback_ref actions require fallback_id")

    @property
    def class_label(self) -> str:
        """Action-class label used by transfer constraints."""
        return self.kind.value


@dataclass(frozen=True)
class InteractionState:
    """Trajectory-aware state at turn t.

    ``turn_index`` counts agent turns only and always equals the number
    of agent entries in ``history``. ``exogenous_tags`` carries the
    scenario-injected external events for the current turn.
    """

    session_id: str
    turn_index: int = 0
    history: tuple[Turn, ...] = ()
    feature_cache: Mapping[str, "FeatureValue"] = field(default_factory=dict)
    trajectory_stats: Mapping[str, float] = field(default_factory=dict)
    active_mode: str = "default"
    exogenous_tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        agent_turns = sum(1 for t in self.history if t.role is Speaker.AGENT)
        if self.turn_index != agent_turns:
            raise ValueError(
                f"turn_index {self.turn_index} != agent turns in history "
                f"({agent_turns})"
            )
        for name, value in self.trajectory_stats.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"counter {name!r} must be finite and >= 0")

    # -- evolution helpers (state is immutable) --------------------------

    def with_feature_cache(
        self, cache: Mapping[str, "FeatureValue"]
    ) -> "InteractionState":
        """Replace the feature cache wholesale (never merged)."""
        return replace(self, feature_cache=dict(cache))

    def with_stat(self, name: str, value: float) -> "InteractionState":
        stats = dict(self.trajectory_stats)
        stats[name] = float(value)
        return replace(self, trajectory_stats=stats)

    def stat(self, name: str, default: float = 0.0) -> float:
        return float(self.trajectory_stats.get(name, default))

    def last_user_turn(self) -> Turn | None:
        for turn in reversed(self.history):
            if turn.role is Speaker.USER:
                return turn
        return None

    def agent_turns(self) -> tuple[Turn, ...]:
        return tuple(t for t in self.history if t.role is Speaker.AGENT)


def initial_state(session_id: str, mode: str = "default") -> InteractionState:
    """Fresh state at t=0 with all named counters present."""
    return InteractionState(
        session_id=session_id,
        active_mode=mode,
        trajectory_stats={name: 0.0 for name in INITIAL_COUNTERS},
    )


def record_user_turn(
    state: InteractionState,
    text: str,
    tags: frozenset[str] | set[str] = frozenset(),
    timestamp_ms: int | None = None,
) -> InteractionState:
    """Append a user turn and install this turn's exogenous tags.

    User turns do not advance ``turn_index`` (it counts agent turns) and
    do not touch counters; counters move only at agent transitions.
    """
    ts = _next_timestamp(state) if timestamp_ms is None else timestamp_ms
    return replace(
        state,
        history=state.history + (Turn(Speaker.USER, text, ts),),
        exogenous_tags=frozenset(tags),
    )


def apply_transition(
    state: InteractionState,
    action: CandidateAction,
    exogenous: frozenset[str] | set[str],
    *,
    reset_counters: bool = False,
    timestamp_ms: int | None = None,
) -> InteractionState:
    """Advance the state by one executed agent action.

    Precondition: the action was ruled admissible or is a fallback.
    Total on valid inputs; never raises for any action kind.
    ``reset_counters`` implements fallback entries that reset the
    trajectory: all ``consecutive_*`` counters are zeroed after the
    normal update.
    """
    ts = _next_timestamp(state) if timestamp_ms is None else timestamp_ms
    turn = Turn(Speaker.AGENT, _history_text(action), ts)

    stats = dict(state.trajectory_stats)
    stats["regeneration_count_this_turn"] = 0.0

    rejected_outcome = action.source is ActionSource.FALLBACK_LIBRARY or (
        action.source is ActionSource.SUPERVISOR
        and action.kind in (ActionKind.SILENCE, ActionKind.DEFER)
    )
    if rejected_outcome:
        stats["consecutive_rejections"] = stats.get("consecutive_rejections", 0.0) + 1
    elif action.kind is not ActionKind.MODE_SWITCH:
        stats["consecutive_rejections"] = 0.0

    new_tags = frozenset(exogenous)
    _update_tag_counters(stats, new_tags)

    if action.kind is ActionKind.MODE_SWITCH:
        stats["turns_in_mode"] = 0.0
        mode = action.mode_target or state.active_mode
    else:
        stats["turns_in_mode"] = stats.get("turns_in_mode", 0.0) + 1
        mode = state.active_mode

    if reset_counters:
        for name in stats:
            if name.startswith("consecutive_"):
                stats[name] = 0.0

    return replace(
        state,
        turn_index=state.turn_index + 1,
        history=state.history + (turn,),
        trajectory_stats=stats,
        active_mode=mode,
        exogenous_tags=new_tags,
    )


def _history_text(action: CandidateAction) -> str:
    if action.kind is ActionKind.UTTERANCE:
        return action.content
    if action.kind is ActionKind.MODE_SWITCH:
        return f"[mode:{action.mode_target}]"
    if action.kind is ActionKind.FALLBACK_REF:
        return action.content
    return f"[{action.kind.value}]"


# consecutive_rejections is action-driven, never tag-driven.
_ACTION_OWNED_STREAKS = frozenset({"rejections"})


def _update_tag_counters(stats: dict[str, float], tags: frozenset[str]) -> None:
    # Key-value tags (e.g. "person_count:2") carry readings, not streaks.
    plain = {t for t in tags if ":" not in t}
    for tag in plain:
        key = f"consecutive_{tag}"
        stats[key] = stats.get(key, 0.0) + 1
    for key in list(stats):
        if not key.startswith("consecutive_"):
            continue
        suffix = key[len("consecutive_"):]
        if suffix in _ACTION_OWNED_STREAKS or suffix in plain:
            continue
        stats[key] = 0.0


def _next_timestamp(state: InteractionState) -> int:
    if not state.history:
        return 0
    return state.history[-1].timestamp_ms + 1000


# -- canonical serialization and digests ---------------------------------


def canonical_state_dict(state: InteractionState) -> dict:
    """Canonical JSON-ready form: fixed field order, sorted nested maps,
    sorted tag lists, integer timestamps. Feeds ``state_digest`` and the
    trajectory log."""
    cache = {}
    for name in sorted(state.feature_cache):
        fv = state.feature_cache[name]
        cache[name] = {
            "name": fv.name,
            "value": fv.value,
            "scope": fv.scope.value,
            "confidence": fv.confidence,
        }
    return {
        "session_id": state.session_id,
        "turn_index": state.turn_index,
        "history": [
            {"role": t.role.value, "text": t.text, "ts": t.timestamp_ms}
            for t in state.history
        ],
        "feature_cache": cache,
        "trajectory_stats": {
            k: state.trajectory_stats[k] for k in sorted(state.trajectory_stats)
        },
        "active_mode": state.active_mode,
        "exogenous_tags": sorted(state.exogenous_tags),
    }


def canonical_state_json(state: InteractionState) -> str:
    return json.dumps(canonical_state_dict(state), separators=(",", ":"))


def state_digest(state: InteractionState) -> str:
    """64-bit stable digest (16 hex chars) of the canonical serialization.

    Equal states yield equal digests; digests are stable across process
    restarts, which makes trajectory replay verification cheap.
    """
    raw = canonical_state_json(state).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


@dataclass(frozen=True)
class Transition:
    """Audit record of one applied transition."""

    prev_state_digest: str
    action: CandidateAction
    next_state_digest: str
    exogenous_tags: frozenset[str]
    decision_ref: str
