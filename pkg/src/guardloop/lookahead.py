"""Finite-horizon rollout checks.

A candidate that passes every overlay right now may still steer the
interaction somewhere no admissible reply exists. The checker simulates
short continuations (user follow-up, then agent replies proposed by a
rollout adapter) and rejects candidates whose simulated futures reach a
state where the admissible set is empty.

Rollouts never mutate session state and emit nothing user-visible; the
unsafe predicate at each simulated agent step is emptiness of the
admissible set under the active overlays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, TYPE_CHECKING

from .errors import RolloutPolicyUnavailable
from .state import CandidateAction, InteractionState, apply_transition, record_user_turn

if TYPE_CHECKING:
    from .features import FeatureExtractor
    from .overlays import Overlay

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LookaheadConfig:
    horizon: int = 1
    rollouts_per_candidate: int = 1
    unsafe_fraction_threshold: float = 0.5
    rollout_policy: str = "scripted"

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.rollouts_per_candidate < 1:
            raise ValueError("rollouts_per_candidate must be >= 1")
        if not 0.0 <= self.unsafe_fraction_threshold <= 1.0:
            raise ValueError("unsafe_fraction_threshold must be in [0, 1]")


class RolloutPolicy(Protocol):
    """Simulates user follow-ups and agent replies for rollouts.

    Scripted in tests; may be model-backed in deployment under the same
    contract. Implementations must be deterministic for fixed inputs.
    """

    def user_followup(
        self, state: InteractionState, depth: int, rollout: int
    ) -> tuple[str, frozenset[str]]: ...

    def agent_replies(
        self, state: InteractionState, depth: int, rollout: int
    ) -> list[CandidateAction]: ...


@dataclass(frozen=True)
class RolloutStep:
    user_text: str
    reply_texts: tuple[str, ...]
    any_admissible: bool
    blocking_verdicts: tuple[tuple[str, str, float], ...]


@dataclass(frozen=True)
class RolloutTrace:
    """One simulated continuation; kept as the witness when unsafe."""

    rollout: int
    steps: tuple[RolloutStep, ...]
    unsafe: bool

    @property
    def blocking_verdicts(self) -> tuple[tuple[str, str, float], ...]:
        for step in self.steps:
            if not step.any_admissible:
                return step.blocking_verdicts
        return ()


@dataclass(frozen=True)
class LookaheadResult:
    passed: bool
    unsafe_fraction: float
    witness: RolloutTrace | None = None
    degraded: bool = False


def check(
    candidate: CandidateAction,
    state: InteractionState,
    overlays: list["Overlay"],
    cfg: LookaheadConfig,
    rollout_policy: RolloutPolicy | None,
    *,
    extractors: list["FeatureExtractor"] | None = None,
    permissive_relaxation: bool = True,
) -> LookaheadResult:
    """Simulate K rollouts of depth <= H from the post-candidate state.

    Passes when no rollout is unsafe, or when the unsafe fraction stays
    below the threshold; with a threshold of zero a single unsafe
    rollout fails the check. An absent rollout adapter degrades the
    check to an advisory pass.
    """
    if rollout_policy is None:
        logger.warning("lookahead configured without a rollout policy; passing advisorily")
        return LookaheadResult(passed=True, unsafe_fraction=0.0, degraded=True)

    base = apply_transition(state, candidate, state.exogenous_tags)
    unsafe_count = 0
    first_witness: RolloutTrace | None = None
    for rollout in range(cfg.rollouts_per_candidate):
        try:
            trace = _run_rollout(
                base,
                overlays,
                cfg.horizon,
                rollout,
                rollout_policy,
                extractors,
                permissive_relaxation,
            )
        except RolloutPolicyUnavailable:
            logger.warning("rollout policy failed mid-check; passing advisorily")
            return LookaheadResult(passed=True, unsafe_fraction=0.0, degraded=True)
        if trace.unsafe:
            unsafe_count += 1
            if first_witness is None:
                first_witness = trace

    fraction = unsafe_count / cfg.rollouts_per_candidate
    passed = unsafe_count == 0 or fraction < cfg.unsafe_fraction_threshold
    return LookaheadResult(
        passed=passed,
        unsafe_fraction=fraction,
        witness=None if passed else first_witness,
    )


def _run_rollout(
    base: InteractionState,
    overlays: list["Overlay"],
    horizon: int,
    rollout: int,
    policy: RolloutPolicy,
    extractors: list["FeatureExtractor"] | None,
    permissive_relaxation: bool,
) -> RolloutTrace:
    # Imported here: observer depends on this module for LookaheadResult.
    from .observer import ObserverLimits, judge

    limits = ObserverLimits()
    state = base
    steps: list[RolloutStep] = []
    unsafe = False
    for depth in range(horizon):
        user_text, tags = policy.user_followup(state, depth, rollout)
        state = record_user_turn(state, user_text, tags)
        replies = policy.agent_replies(state, depth, rollout)
        if not replies:
            raise RolloutPolicyUnavailable("rollout policy produced no replies")
        adm, _ = judge(
            replies,
            state,
            overlays,
            limits,
            extractors=extractors,
            permissive_relaxation=permissive_relaxation,
        )
        blocking: tuple[tuple[str, str, float], ...] = ()
        any_admissible = bool(adm.admissible_indices)
        if not any_admissible:
            blocking = tuple(
                (v.overlay_id, v.descriptor, v.deviation)
                for judged in adm.candidates
                for v in judged.verdicts
                if not v.admissible
            )
        steps.append(
            RolloutStep(
                user_text=user_text,
                reply_texts=tuple(r.content for r in replies),
                any_admissible=any_admissible,
                blocking_verdicts=blocking,
            )
        )
        if not any_admissible:
            unsafe = True
            break
        best = adm.admissible_indices[0]
        state = apply_transition(state, adm.candidates[best].candidate, state.exogenous_tags)
    return RolloutTrace(rollout=rollout, steps=tuple(steps), unsafe=unsafe)
