"""Per-turn orchestration of the full supervisory stack.

For each user turn the engine records the input, consults the
supervisor (gate, then mode selection — mode switches are judged like
any other action), runs the observer's enforcement loop under the
active mode's overlay pack, writes the executed action's features into
the state cache, and applies the transition. Gated turns perform zero
base-policy calls.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

from .ensemble import ArbitrationRule, DisagreementKind, arbitrate
from .errors import BasePolicyUnavailable
from .features import (
    ACTION_CLASS_FEATURE,
    FeatureExtractor,
    FeatureValue,
    builtin_extractors,
    extract_all,
    label,
)
from .lookahead import LookaheadConfig, LookaheadResult, RolloutPolicy, check
from .observer import (
    AdmissibleSet,
    AttemptRecord,
    BasePolicy,
    Disposition,
    DispositionKind,
    FallbackLibrary,
    FeedbackDirective,
    ObserverDecision,
    ObserverLimits,
    RejectionReason,
    decide,
    forced_feedback_for,
    implicit_feedback_for,
    judge,
    pick_best,
    select_fallback,
)
from .overlays import Overlay, OverlayVerdict
from .state import (
    ActionKind,
    ActionSource,
    CandidateAction,
    InteractionState,
    apply_transition,
    record_user_turn,
    state_digest,
)
from .supervisor import GateDecision, SupervisorConfig, gate, select_mode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleMember:
    overlay_pack: str
    limits: ObserverLimits


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[EnsembleMember, ...]
    rule: ArbitrationRule


@dataclass(frozen=True)
class EngineConfig:
    overlay_packs: Mapping[str, list[Overlay]]
    default_pack: str
    fallbacks: FallbackLibrary
    limits: ObserverLimits = ObserverLimits()
    supervisor: SupervisorConfig | None = None
    lookahead: LookaheadConfig | None = None
    ensemble: EnsembleSpec | None = None
    permissive_relaxation: bool = True

    def pack(self, pack_id: str) -> list[Overlay]:
        if pack_id not in self.overlay_packs:
            raise KeyError(f"unknown overlay pack {pack_id!r}")
        return self.overlay_packs[pack_id]


@dataclass(frozen=True)
class ModeSwitchRecord:
    target: str
    admissible: bool
    verdicts: tuple[OverlayVerdict, ...]


@dataclass(frozen=True)
class TurnResult:
    """Everything the trajectory log records about one user turn."""

    ordinal: int
    user_text: str
    tags: frozenset[str]
    gate: GateDecision
    mode: str
    policy_profile: str
    mode_switch: ModeSwitchRecord | None
    decision: ObserverDecision | None
    action: CandidateAction | None
    prev_digest: str
    digest: str
    policy_calls: int
    ensemble_disagreement: bool | None = None


class Engine:
    """Session-serial driver; one in-flight turn per session."""

    def __init__(
        self,
        config: EngineConfig,
        policy: BasePolicy,
        rollout_policy: RolloutPolicy | None = None,
        extractors: list[FeatureExtractor] | None = None,
    ) -> None:
        self.config = config
        self.policy = policy
        self.rollout_policy = rollout_policy
        self.extractors = builtin_extractors() if extractors is None else extractors

    def initial_mode(self) -> str:
        if self.config.supervisor is not None:
            return self.config.supervisor.initial_mode
        return self.config.default_pack

    def active_pack(self, mode: str) -> list[Overlay]:
        if self.config.supervisor is not None:
            return self.config.pack(self.config.supervisor.mode(mode).overlay_pack)
        return self.config.pack(self.config.default_pack)

    def run_turn(
        self,
        state: InteractionState,
        ordinal: int,
        user_text: str,
        tags: frozenset[str],
        pending_feedback: FeedbackDirective | None,
    ) -> tuple[InteractionState, TurnResult, FeedbackDirective | None]:
        prev_digest = state_digest(state)
        state = record_user_turn(state, user_text, tags)

        probe = CandidateAction("", kind=ActionKind.SILENCE, source=ActionSource.SUPERVISOR)
        probe_features = dict(extract_all(self.extractors, state, probe))
        probe_features[ACTION_CLASS_FEATURE] = label(ACTION_CLASS_FEATURE, probe.class_label)
        counters = dict(state.trajectory_stats)

        gate_decision = GateDecision(engage=True)
        mode_switch: ModeSwitchRecord | None = None
        if self.config.supervisor is not None:
            gate_decision = gate(probe_features, counters, self.config.supervisor)
            if not gate_decision.engage:
                result = TurnResult(
                    ordinal=ordinal,
                    user_text=user_text,
                    tags=tags,
                    gate=gate_decision,
                    mode=state.active_mode,
                    policy_profile=self._profile(state.active_mode),
                    mode_switch=None,
                    decision=None,
                    action=None,
                    prev_digest=prev_digest,
                    digest=state_digest(state),
                    policy_calls=0,
                )
                return state, result, pending_feedback

            state, mode_switch = self._maybe_switch_mode(state, probe_features, counters)

        active_mode = state.active_mode
        overlays = self.active_pack(active_mode)
        lookahead_checker = self._lookahead_checker(overlays)

        if self.config.ensemble is not None:
            decision, action, disagreement = self._ensemble_decide(
                state, pending_feedback, lookahead_checker
            )
        else:
            disagreement = None
            decision, action = decide(
                state,
                self.policy,
                overlays,
                self.config.fallbacks,
                self.config.limits,
                lookahead_checker,
                pending_feedback=pending_feedback,
                extractors=self.extractors,
                permissive_relaxation=self.config.permissive_relaxation,
            )

        state = state.with_feature_cache(self._features_for(state, decision, action))
        resets = False
        if decision.disposition.kind is DispositionKind.FALLBACK:
            resets = self.config.fallbacks.entry(decision.disposition.fallback_id).resets_trajectory
        state = apply_transition(state, action, tags, reset_counters=resets)

        result = TurnResult(
            ordinal=ordinal,
            user_text=user_text,
            tags=tags,
            gate=gate_decision,
            mode=active_mode,
            policy_profile=self._profile(active_mode),
            mode_switch=mode_switch,
            decision=decision,
            action=action,
            prev_digest=prev_digest,
            digest=state_digest(state),
            policy_calls=self._policy_calls(decision),
            ensemble_disagreement=disagreement,
        )
        next_feedback = None
        if (
            decision.feedback is not None
            and decision.disposition.kind is DispositionKind.EXECUTE
        ):
            next_feedback = decision.feedback  # implicit near-miss guidance
        return state, result, next_feedback

    # -- internals --------------------------------------------------------

    def _profile(self, mode: str) -> str:
        if self.config.supervisor is not None:
            return self.config.supervisor.mode(mode).policy_profile
        return getattr(self.policy, "profile_id", "default")

    def _maybe_switch_mode(
        self,
        state: InteractionState,
        probe_features: dict[str, FeatureValue],
        counters: dict[str, float],
    ) -> tuple[InteractionState, ModeSwitchRecord | None]:
        supervisor = self.config.supervisor
        assert supervisor is not None
        target = select_mode(
            state.active_mode,
            state.stat("turns_in_mode"),
            probe_features,
            counters,
            supervisor,
        )
        if target == state.active_mode:
            return state, None

        switch = CandidateAction(
            content="",
            kind=ActionKind.MODE_SWITCH,
            source=ActionSource.SUPERVISOR,
            mode_target=target,
        )
        # The switch is judged under the pack active when it is proposed.
        adm, reason = judge(
            [switch],
            state,
            self.active_pack(state.active_mode),
            self.config.limits,
            extractors=self.extractors,
            permissive_relaxation=self.config.permissive_relaxation,
        )
        verdicts = adm.candidates[0].verdicts
        if reason is not None:
            logger.warning(
                "mode switch %s -> %s rejected (%s); remaining",
                state.active_mode,
                target,
                reason.value,
            )
            return state, ModeSwitchRecord(target, False, verdicts)
        state = apply_transition(state, switch, state.exogenous_tags)
        return state, ModeSwitchRecord(target, True, verdicts)

    def _lookahead_checker(self, overlays: list[Overlay]):
        cfg = self.config.lookahead
        if cfg is None:
            return None

        def checker(candidate: CandidateAction, state: InteractionState) -> LookaheadResult:
            return check(
                candidate,
                state,
                overlays,
                cfg,
                self.rollout_policy,
                extractors=self.extractors,
                permissive_relaxation=self.config.permissive_relaxation,
            )

        return checker

    def _features_for(
        self,
        state: InteractionState,
        decision: ObserverDecision,
        action: CandidateAction,
    ) -> dict[str, FeatureValue]:
        if (
            decision.disposition.kind is DispositionKind.EXECUTE
            and decision.attempt_log
        ):
            final = decision.attempt_log[-1].admissible_set
            idx = decision.disposition.execute_index
            return dict(final.candidates[idx].features)
        features = dict(extract_all(self.extractors, state, action))
        features[ACTION_CLASS_FEATURE] = label(ACTION_CLASS_FEATURE, action.class_label)
        return features

    @staticmethod
    def _policy_calls(decision: ObserverDecision) -> int:
        calls = len(decision.attempt_log)
        if decision.policy_unavailable is not None:
            calls += 1  # the failed sample call itself
        return calls

    def _ensemble_decide(
        self,
        state: InteractionState,
        pending_feedback: FeedbackDirective | None,
        lookahead_checker,
    ) -> tuple[ObserverDecision, CandidateAction, bool]:
        spec = self.config.ensemble
        assert spec is not None
        limits = self.config.limits
        working = state.with_stat("regeneration_count_this_turn", 0.0)
        feedback = pending_feedback
        attempts = 0
        attempt_log: list[AttemptRecord] = []
        last_forced: FeedbackDirective | None = None
        last_reason: RejectionReason | None = None
        saw_disagreement = False

        while True:
            try:
                candidates = self.policy.sample(working, feedback, limits.candidates_per_sample)
            except BasePolicyUnavailable as exc:
                entry = self.config.fallbacks.always_entry
                action = CandidateAction(
                    entry.action_content,
                    kind=ActionKind.FALLBACK_REF,
                    generation_attempt=attempts,
                    source=ActionSource.FALLBACK_LIBRARY,
                    fallback_id=entry.id,
                )
                decision = ObserverDecision(
                    disposition=Disposition(DispositionKind.FALLBACK, fallback_id=entry.id),
                    rejection_reason=last_reason,
                    feedback=last_forced,
                    attempts_used=attempts,
                    attempt_log=tuple(attempt_log),
                    policy_unavailable=exc.reason,
                )
                return decision, action, saw_disagreement

            per_member = [
                judge(
                    candidates,
                    working,
                    self.config.pack(member.overlay_pack),
                    member.limits,
                    extractors=self.extractors,
                    permissive_relaxation=self.config.permissive_relaxation,
                )
                for member in spec.members
            ]
            joint, disagreement = arbitrate(per_member, spec.rule)
            saw_disagreement = saw_disagreement or disagreement
            lead_adm = per_member[0][0]

            if disagreement:
                decision, action = self._disagreement_outcome(
                    spec.rule, attempts, attempt_log, lead_adm
                )
                return decision, action, True

            reason = next((r for _, r in per_member if r is not None), None)
            la_result = None
            best = None
            if reason is None:
                best = pick_best(lead_adm)
                if lookahead_checker is not None and best is not None:
                    la_result = lookahead_checker(lead_adm.candidates[best].candidate, working)
                    if not la_result.passed:
                        reason = RejectionReason.LOOKAHEAD_FAILURE

            if reason is None and best is not None:
                implicit = implicit_feedback_for(lead_adm.candidates[best], limits.implicit_margin)
                attempt_log.append(AttemptRecord(attempts, lead_adm, None, None, la_result))
                decision = ObserverDecision(
                    disposition=Disposition(DispositionKind.EXECUTE, execute_index=best),
                    rejection_reason=None,
                    feedback=implicit,
                    attempts_used=attempts,
                    attempt_log=tuple(attempt_log),
                )
                return decision, lead_adm.candidates[best].candidate, saw_disagreement

            forced = forced_feedback_for(reason, lead_adm, la_result)
            attempt_log.append(AttemptRecord(attempts, lead_adm, reason, forced, la_result))
            last_forced, last_reason = forced, reason
            if attempts < limits.regen_bound:
                attempts += 1
                working = working.with_stat("regeneration_count_this_turn", float(attempts))
                feedback = forced
                continue

            probe = CandidateAction("", kind=ActionKind.SILENCE, source=ActionSource.SUPERVISOR)
            probe_features = extract_all(self.extractors, working, probe)
            entry_id = select_fallback(
                self.config.fallbacks, probe_features, dict(working.trajectory_stats)
            )
            entry = self.config.fallbacks.entry(entry_id)
            action = CandidateAction(
                entry.action_content,
                kind=ActionKind.FALLBACK_REF,
                generation_attempt=attempts,
                source=ActionSource.FALLBACK_LIBRARY,
                fallback_id=entry_id,
            )
            decision = ObserverDecision(
                disposition=Disposition(DispositionKind.FALLBACK, fallback_id=entry_id),
                rejection_reason=reason,
                feedback=last_forced,
                attempts_used=attempts,
                attempt_log=tuple(attempt_log),
            )
            return decision, action, saw_disagreement

    def _disagreement_outcome(
        self,
        rule: ArbitrationRule,
        attempts: int,
        attempt_log: list[AttemptRecord],
        lead_adm: AdmissibleSet,
    ) -> tuple[ObserverDecision, CandidateAction]:
        """Observer disagreement is a risk signal: no base-policy
        utterance is executed this turn."""
        action_spec = rule.disagreement_action
        attempt_log = attempt_log + [AttemptRecord(attempts, lead_adm, None, None, None)]
        if action_spec.kind == DisagreementKind.FALLBACK:
            entry = self.config.fallbacks.entry(action_spec.fallback_id)
            action = CandidateAction(
                entry.action_content,
                kind=ActionKind.FALLBACK_REF,
                generation_attempt=attempts,
                source=ActionSource.FALLBACK_LIBRARY,
                fallback_id=entry.id,
            )
            disposition = Disposition(DispositionKind.FALLBACK, fallback_id=entry.id)
        elif action_spec.kind == DisagreementKind.ASK_CLARIFY:
            action = CandidateAction(
                action_spec.clarify_template,
                kind=ActionKind.UTTERANCE,
                generation_attempt=attempts,
                source=ActionSource.SUPERVISOR,
            )
            disposition = Disposition(DispositionKind.DEFER)
        else:
            action = CandidateAction(
                "",
                kind=ActionKind.SILENCE,
                generation_attempt=attempts,
                source=ActionSource.SUPERVISOR,
            )
            disposition = Disposition(DispositionKind.DEFER)
        decision = ObserverDecision(
            disposition=disposition,
            rejection_reason=None,
            feedback=None,
            attempts_used=attempts,
            attempt_log=tuple(attempt_log),
        )
        return decision, action
