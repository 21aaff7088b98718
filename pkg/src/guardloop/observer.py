"""The runtime observer: admissibility judgment and enforcement.

``judge`` evaluates every overlay on every candidate and applies the
rejection taxonomy; ``decide`` wraps judgment in the enforcement loop —
bounded regeneration with forced feedback, optional lookahead, and the
fallback library when the budget is exhausted or the policy is down.

The executed action is always drawn from the admissible set (or from
the fallback library, which is exempt by construction); the decision
value records everything needed to audit why.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Protocol, Sequence

from .conditions import Clause, clause_to_dict, parse_clause
from .errors import (
    BasePolicyUnavailable,
    FallbackLibraryInvalid,
    ParseError,
    ValidationError,
)
from .features import (
    ACTION_CLASS_FEATURE,
    FeatureExtractor,
    FeatureValue,
    builtin_extractors,
    extract_all,
    label,
)
from .lookahead import LookaheadResult
from .overlays import Overlay, OverlayKind, OverlayVerdict, evaluate_pack
from .state import ActionKind, ActionSource, CandidateAction, InteractionState

logger = logging.getLogger(__name__)


class RejectionReason(str, Enum):
    EMPTY_ADMISSIBLE_SET = "empty_admissible_set"
    LOW_CONFIDENCE = "low_confidence"
    OVERLAY_CONFLICT = "overlay_conflict"
    LOOKAHEAD_FAILURE = "lookahead_failure"


class FeedbackStrength(str, Enum):
    IMPLICIT = "implicit"
    FORCED = "forced"


class DispositionKind(str, Enum):
    EXECUTE = "execute"
    REGENERATE = "regenerate"
    FALLBACK = "fallback"
    DEFER = "defer"


@dataclass(frozen=True)
class FeedbackDirective:
    """Constraint-aware guidance for the base policy's next sample."""

    strength: FeedbackStrength
    violated_overlays: tuple[tuple[str, str, float], ...]  # (id, descriptor, deviation)
    directive_text: str

    def __post_init__(self) -> None:
        if self.strength is FeedbackStrength.FORCED and not self.violated_overlays:
            raise ValueError("forced feedback must name at least one overlay")


@dataclass(frozen=True)
class ObserverLimits:
    regen_bound: int = 2
    conf_threshold: float = 0.5
    conflict_threshold: float = 1.0
    implicit_margin: float = 0.05
    candidates_per_sample: int = 1

    def __post_init__(self) -> None:
        if self.regen_bound < 0:
            raise ValueError("regen_bound must be >= 0")
        if self.candidates_per_sample < 1:
            raise ValueError("candidates_per_sample must be >= 1")


@dataclass(frozen=True)
class JudgedCandidate:
    candidate: CandidateAction
    verdicts: tuple[OverlayVerdict, ...]
    confidence: float  # min over this candidate's verdict confidences
    features: Mapping[str, FeatureValue]

    @property
    def admissible(self) -> bool:
        return all(v.admissible for v in self.verdicts)

    @property
    def worst_deviation(self) -> float:
        return max((v.deviation for v in self.verdicts), default=0.0)


@dataclass(frozen=True)
class AdmissibleSet:
    candidates: tuple[JudgedCandidate, ...]
    admissible_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        expected = tuple(i for i, c in enumerate(self.candidates) if c.admissible)
        if self.admissible_indices != expected:
            raise ValueError("admissible_indices must list exactly the fully admissible candidates")


@dataclass(frozen=True)
class Disposition:
    kind: DispositionKind
    execute_index: int | None = None
    fallback_id: str | None = None


@dataclass(frozen=True)
class AttemptRecord:
    """One regeneration-loop iteration, kept for the trajectory log."""

    attempt: int
    admissible_set: AdmissibleSet
    rejection_reason: RejectionReason | None
    feedback_issued: FeedbackDirective | None
    lookahead: LookaheadResult | None = None


@dataclass(frozen=True)
class ObserverDecision:
    disposition: Disposition
    rejection_reason: RejectionReason | None
    feedback: FeedbackDirective | None
    attempts_used: int
    attempt_log: tuple[AttemptRecord, ...] = ()
    policy_unavailable: str | None = None

    def __post_init__(self) -> None:
        if self.disposition.kind is DispositionKind.EXECUTE and self.rejection_reason is not None:
            raise ValueError("an executed decision carries no rejection reason")


class BasePolicy(Protocol):
    """The unconstrained candidate generator (never sees overlays)."""

    profile_id: str

    def sample(
        self,
        state: InteractionState,
        feedback: FeedbackDirective | None,
        n: int,
    ) -> list[CandidateAction]: ...


LookaheadChecker = Callable[[CandidateAction, InteractionState], LookaheadResult]


# -- judgment -------------------------------------------------------------


def judge(
    candidates: Sequence[CandidateAction],
    state: InteractionState,
    overlays: list[Overlay],
    thresholds: ObserverLimits,
    *,
    extractors: list[FeatureExtractor] | None = None,
    permissive_relaxation: bool = True,
) -> tuple[AdmissibleSet, RejectionReason | None]:
    """Evaluate every overlay on every candidate and classify the result.

    Rejection taxonomy: an empty admissible set is reported as an
    overlay conflict when, for every candidate, some pair of activated
    overlays demands disjoint ranges of one feature with enough combined
    severity weight; a non-empty set whose best aggregate confidence
    falls below ``conf_threshold`` is low-confidence.
    """
    if not candidates:
        raise ValueError("judge requires at least one candidate")
    registry = builtin_extractors() if extractors is None else extractors

    judged: list[JudgedCandidate] = []
    for cand in candidates:
        features = extract_all(registry, state, cand)
        features[ACTION_CLASS_FEATURE] = label(ACTION_CLASS_FEATURE, cand.class_label)
        verdicts = evaluate_pack(
            overlays, features, features, permissive_relaxation=permissive_relaxation
        )
        conf = min((v.confidence for v in verdicts), default=1.0)
        judged.append(JudgedCandidate(cand, verdicts, conf, features))

    admissible = tuple(i for i, c in enumerate(judged) if c.admissible)
    result = AdmissibleSet(tuple(judged), admissible)

    if not admissible:
        if _all_conflicted(judged, overlays, thresholds.conflict_threshold):
            return result, RejectionReason.OVERLAY_CONFLICT
        return result, RejectionReason.EMPTY_ADMISSIBLE_SET
    best_conf = max(judged[i].confidence for i in admissible)
    if best_conf < thresholds.conf_threshold:
        return result, RejectionReason.LOW_CONFIDENCE
    return result, None


def _all_conflicted(
    judged: list[JudgedCandidate], overlays: list[Overlay], conflict_threshold: float
) -> bool:
    by_id = {ov.id: ov for ov in overlays}
    return all(_has_conflict_pair(c, by_id, conflict_threshold) for c in judged)


def _has_conflict_pair(
    judged: JudgedCandidate, overlays: Mapping[str, Overlay], threshold: float
) -> bool:
    active = [
        (overlays[v.overlay_id], v)
        for v in judged.verdicts
        if v.activated and v.confidence > 0 and v.overlay_id in overlays
    ]
    for i in range(len(active)):
        for j in range(i + 1, len(active)):
            if _ranges_disjoint(active[i], active[j]):
                weight = active[i][0].severity_weight + active[j][0].severity_weight
                if weight >= threshold:
                    return True
    return False


def _ranges_disjoint(
    a: tuple[Overlay, OverlayVerdict], b: tuple[Overlay, OverlayVerdict]
) -> bool:
    """Disjointness of the tolerance-adjusted satisfiable intervals of
    two scalar constraints on the same feature."""
    (ov_a, v_a), (ov_b, v_b) = a, b
    if ov_a.kind == OverlayKind.TRANSFER or ov_b.kind == OverlayKind.TRANSFER:
        return False
    if ov_a.constraint.name != ov_b.constraint.name:
        return False
    if ov_a.constraint.op == ov_b.constraint.op:
        return False
    if ov_a.constraint.op == ">=":
        lower, upper = (ov_a, v_a), (ov_b, v_b)
    else:
        lower, upper = (ov_b, v_b), (ov_a, v_a)
    lo = float(lower[0].constraint.value) - lower[1].effective_epsilon
    hi = float(upper[0].constraint.value) + upper[1].effective_epsilon
    return lo > hi


# -- fallback library ------------------------------------------------------


@dataclass(frozen=True)
class FallbackEntry:
    id: str
    condition: Clause | None  # None means "always"
    action_content: str
    resets_trajectory: bool = False


@dataclass(frozen=True)
class FallbackLibrary:
    entries: tuple[FallbackEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise FallbackLibraryInvalid("fallback library must not be empty")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FallbackLibraryInvalid("fallback entry ids must be unique")
        always = [e for e in self.entries if e.condition is None]
        if len(always) != 1:
            raise FallbackLibraryInvalid("exactly one entry must have condition 'always'")
        if self.entries[-1].condition is not None:
            raise FallbackLibraryInvalid("the 'always' entry must be last")

    def entry(self, entry_id: str) -> FallbackEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    @property
    def always_entry(self) -> FallbackEntry:
        return self.entries[-1]


def select_fallback(
    library: FallbackLibrary,
    features: Mapping[str, FeatureValue],
    counters: Mapping[str, float],
) -> str:
    """First entry (in order) whose condition holds; the terminal
    'always' entry guarantees totality."""
    for entry in library.entries:
        if entry.condition is None or entry.condition.holds(features, counters):
            return entry.id
    return library.always_entry.id  # unreachable given validation


def parse_fallback_library(config_text: str) -> FallbackLibrary:
    """Parse ``{"entries": [{id, condition, action, resets_trajectory}]}``."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ValidationError("<document>", "fallback library needs an 'entries' list")
    entries: list[FallbackEntry] = []
    for idx, raw in enumerate(doc["entries"]):
        position = f"entry[{idx}]"
        if not isinstance(raw, dict):
            raise ValidationError(position, "entry must be an object")
        entry_id = raw.get("id")
        if not isinstance(entry_id, str) or not entry_id:
            raise ValidationError(position, "entry needs a non-empty 'id'")
        condition_raw = raw.get("condition")
        if condition_raw == "always":
            condition = None
        else:
            condition = parse_clause(condition_raw, entry_id)
        action = raw.get("action")
        if not isinstance(action, str) or not action:
            raise ValidationError(entry_id, "entry needs a non-empty 'action'")
        resets = raw.get("resets_trajectory", False)
        if not isinstance(resets, bool):
            raise ValidationError(entry_id, "'resets_trajectory' must be a boolean")
        entries.append(FallbackEntry(entry_id, condition, action, resets))
    try:
        return FallbackLibrary(tuple(entries))
    except FallbackLibraryInvalid as exc:
        raise ValidationError("<entries>", str(exc)) from exc


def serialize_fallback_library(library: FallbackLibrary) -> str:
    entries = []
    for e in library.entries:
        entries.append(
            {
                "id": e.id,
                "condition": "always" if e.condition is None else clause_to_dict(e.condition),
                "action": e.action_content,
                "resets_trajectory": e.resets_trajectory,
            }
        )
    return json.dumps({"entries": entries}, indent=2)


# -- the enforcement loop ---------------------------------------------------


def decide(
    state: InteractionState,
    base_policy: BasePolicy,
    overlays: list[Overlay],
    fallbacks: FallbackLibrary,
    limits: ObserverLimits,
    lookahead: LookaheadChecker | None = None,
    *,
    pending_feedback: FeedbackDirective | None = None,
    extractors: list[FeatureExtractor] | None = None,
    permissive_relaxation: bool = True,
) -> tuple[ObserverDecision, CandidateAction]:
    """Sample, judge, and either execute, regenerate, or fall back.

    Work is bounded: at most ``regen_bound + 1`` base-policy calls per
    turn. Lookahead failures consume regeneration budget like any other
    rejection. A near-miss execution (some active verdict within
    ``implicit_margin`` of its tolerance) attaches implicit feedback for
    the next turn.
    """
    registry = builtin_extractors() if extractors is None else extractors
    working = state.with_stat("regeneration_count_this_turn", 0.0)
    feedback = pending_feedback
    attempt_log: list[AttemptRecord] = []
    attempts = 0
    last_forced: FeedbackDirective | None = None
    last_reason: RejectionReason | None = None

    while True:
        try:
            candidates = base_policy.sample(working, feedback, limits.candidates_per_sample)
        except BasePolicyUnavailable as exc:
            logger.warning("base policy unavailable (%s); executing 'always' fallback", exc)
            entry = fallbacks.always_entry
            action = _fallback_action(entry, attempts)
            decision = ObserverDecision(
                disposition=Disposition(DispositionKind.FALLBACK, fallback_id=entry.id),
                rejection_reason=last_reason,
                feedback=last_forced,
                attempts_used=attempts,
                attempt_log=tuple(attempt_log),
                policy_unavailable=exc.reason,
            )
            return decision, action

        adm, reason = judge(
            candidates,
            working,
            overlays,
            limits,
            extractors=registry,
            permissive_relaxation=permissive_relaxation,
        )

        la_result: LookaheadResult | None = None
        best = pick_best(adm) if reason is None else None
        if reason is None and lookahead is not None and best is not None:
            la_result = lookahead(adm.candidates[best].candidate, working)
            if not la_result.passed:
                reason = RejectionReason.LOOKAHEAD_FAILURE

        if reason is None and best is not None:
            implicit = implicit_feedback_for(adm.candidates[best], limits.implicit_margin)
            attempt_log.append(AttemptRecord(attempts, adm, None, None, la_result))
            decision = ObserverDecision(
                disposition=Disposition(DispositionKind.EXECUTE, execute_index=best),
                rejection_reason=None,
                feedback=implicit,
                attempts_used=attempts,
                attempt_log=tuple(attempt_log),
            )
            return decision, adm.candidates[best].candidate

        forced = forced_feedback_for(reason, adm, la_result)
        attempt_log.append(AttemptRecord(attempts, adm, reason, forced, la_result))
        last_forced, last_reason = forced, reason

        if attempts < limits.regen_bound:
            attempts += 1
            working = working.with_stat("regeneration_count_this_turn", float(attempts))
            feedback = forced
            continue

        probe = CandidateAction("", kind=ActionKind.SILENCE, source=ActionSource.SUPERVISOR)
        probe_features = extract_all(registry, working, probe)
        counters = dict(working.trajectory_stats)
        entry_id = select_fallback(fallbacks, probe_features, counters)
        entry = fallbacks.entry(entry_id)
        action = _fallback_action(entry, attempts)
        decision = ObserverDecision(
            disposition=Disposition(DispositionKind.FALLBACK, fallback_id=entry_id),
            rejection_reason=reason,
            feedback=last_forced,
            attempts_used=attempts,
            attempt_log=tuple(attempt_log),
        )
        return decision, action


def _fallback_action(entry: FallbackEntry, attempts: int) -> CandidateAction:
    return CandidateAction(
        content=entry.action_content,
        kind=ActionKind.FALLBACK_REF,
        generation_attempt=attempts,
        source=ActionSource.FALLBACK_LIBRARY,
        fallback_id=entry.id,
    )


def pick_best(adm: AdmissibleSet) -> int | None:
    """Highest aggregate confidence; ties broken by lowest worst-case
    deviation, then by generation order."""
    best: int | None = None
    for i in adm.admissible_indices:
        if best is None:
            best = i
            continue
        cand, incumbent = adm.candidates[i], adm.candidates[best]
        if cand.confidence > incumbent.confidence:
            best = i
        elif cand.confidence == incumbent.confidence and (
            cand.worst_deviation < incumbent.worst_deviation
        ):
            best = i
    return best


def implicit_feedback_for(
    judged: JudgedCandidate, implicit_margin: float
) -> FeedbackDirective | None:
    near: list[tuple[str, str, float]] = []
    for v in judged.verdicts:
        if not v.activated:
            continue
        slack = v.effective_epsilon - v.deviation
        if 0 < slack <= implicit_margin:
            near.append((v.overlay_id, v.descriptor, v.deviation))
    if not near:
        return None
    names = ", ".join(item[0] for item in near)
    return FeedbackDirective(
        strength=FeedbackStrength.IMPLICIT,
        violated_overlays=tuple(near),
        directive_text=(
            f"Guidance: the last response passed near the tolerance boundary "
            f"of {names}; keep a wider margin on the next turn."
        ),
    )


def forced_feedback_for(
    reason: RejectionReason,
    adm: AdmissibleSet,
    la_result: LookaheadResult | None,
) -> FeedbackDirective:
    violated: dict[str, tuple[str, str, float]] = {}

    if reason is RejectionReason.LOW_CONFIDENCE:
        for judged in adm.candidates:
            for v in judged.verdicts:
                if v.confidence < 1.0 and v.overlay_id not in violated:
                    violated[v.overlay_id] = (
                        v.overlay_id,
                        f"confidence {v.confidence:.2f} too low",
                        v.deviation,
                    )
    elif reason is RejectionReason.LOOKAHEAD_FAILURE:
        if la_result is not None and la_result.witness is not None:
            for oid, desc, dev in la_result.witness.blocking_verdicts:
                violated.setdefault(oid, (oid, desc, dev))
        if not violated:
            fraction = la_result.unsafe_fraction if la_result else 1.0
            violated["lookahead"] = (
                "lookahead",
                "projected constraint violation within the rollout horizon",
                fraction,
            )
    else:
        for judged in adm.candidates:
            for v in judged.verdicts:
                if not v.admissible and v.overlay_id not in violated:
                    violated[v.overlay_id] = (v.overlay_id, v.descriptor, v.deviation)

    if not violated:
        # Degenerate but possible (e.g. low confidence with all-confident
        # verdicts filtered); keep the forced invariant satisfied.
        violated[reason.value] = (reason.value, f"rejected: {reason.value}", 0.0)

    items = tuple(violated.values())
    details = "; ".join(f"[{oid}] {desc}" for oid, desc, _ in items)
    return FeedbackDirective(
        strength=FeedbackStrength.FORCED,
        violated_overlays=items,
        directive_text=(
            f"Regenerate: the previous candidate was rejected "
            f"({reason.value}). {details}"
        ),
    )
