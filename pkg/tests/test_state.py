from __future__ import annotations

import dataclasses

import pytest
from hypothesis import given, strategies as st

from guardloop.features import scalar
from guardloop.state import (
    ActionKind,
    ActionSource,
    CandidateAction,
    InteractionState,
    Speaker,
    Turn,
    apply_transition,
    canonical_state_json,
    initial_state,
    record_user_turn,
    state_digest,
)

# Recorded once from the reference serialization printed by
# canonical_state_json; guards digest stability across releases.
GOLDEN_DIGEST = "220658205b1351b7"


def golden_state() -> InteractionState:
    s = initial_state("golden-reference")
    s = record_user_turn(s, "Hello there.", frozenset({"fixation"}), timestamp_ms=0)
    s = s.with_feature_cache({"empathy_lexicon": scalar("empathy_lexicon", 0.6)})
    return apply_transition(
        s, CandidateAction("Hi, it is nice to chat."), frozenset({"fixation"}), timestamp_ms=1000
    )


def test_first_transition_appends_turn():
    s = initial_state("s")
    out = apply_transition(s, CandidateAction("Hello"), frozenset())
    assert out.turn_index == 1
    assert len(out.history) == 1
    assert out.history[0].role is Speaker.AGENT
    assert out.history[0].text == "Hello"


def test_silence_records_marker_turn():
    s = initial_state("s")
    for _ in range(3):
        s = apply_transition(s, CandidateAction("hi"), frozenset())
    out = apply_transition(s, CandidateAction("", kind=ActionKind.SILENCE), frozenset())
    assert out.turn_index == 4
    assert out.history[-1].text == "[silence]"


def test_admissible_utterance_resets_consecutive_rejections():
    s = initial_state("s").with_stat("consecutive_rejections", 2.0)
    out = apply_transition(s, CandidateAction("fine"), frozenset())
    assert out.stat("consecutive_rejections") == 0.0


def test_counter_trace_three_step_oracle():
    # Hand-traced: fallback (0 -> 1), supervisor silence (1 -> 2),
    # admissible utterance (2 -> 0).
    s = initial_state("s")
    observed = []
    s = apply_transition(
        s,
        CandidateAction("pause", kind=ActionKind.FALLBACK_REF,
                        source=ActionSource.FALLBACK_LIBRARY, fallback_id="x"),
        frozenset(),
    )
    observed.append(s.stat("consecutive_rejections"))
    s = apply_transition(
        s,
        CandidateAction("", kind=ActionKind.SILENCE, source=ActionSource.SUPERVISOR),
        frozenset(),
    )
    observed.append(s.stat("consecutive_rejections"))
    s = apply_transition(s, CandidateAction("All good"), frozenset())
    observed.append(s.stat("consecutive_rejections"))
    assert observed == [1.0, 2.0, 0.0]


def test_mode_switch_changes_mode_and_resets_mode_clock():
    s = initial_state("s", mode="smalltalk")
    s = apply_transition(s, CandidateAction("hi"), frozenset())
    assert s.stat("turns_in_mode") == 1.0
    s = apply_transition(
        s,
        CandidateAction("", kind=ActionKind.MODE_SWITCH,
                        source=ActionSource.SUPERVISOR, mode_target="breathing"),
        frozenset(),
    )
    assert s.active_mode == "breathing"
    assert s.stat("turns_in_mode") == 0.0
    assert s.history[-1].text == "[mode:breathing]"
    assert s.turn_index == 2


def test_tag_counters_increment_and_reset():
    s = initial_state("s")
    for expected in (1.0, 2.0, 3.0):
        s = apply_transition(s, CandidateAction("hi"), frozenset({"fixation"}))
        assert s.stat("consecutive_fixation") == expected
    s = apply_transition(s, CandidateAction("hi"), frozenset({"calm"}))
    assert s.stat("consecutive_fixation") == 0.0
    assert s.stat("consecutive_calm") == 1.0
    # key-value tags carry readings, not streaks
    s = apply_transition(s, CandidateAction("hi"), frozenset({"person_count:2"}))
    assert "consecutive_person_count:2" not in s.trajectory_stats


def test_reset_counters_zeroes_streaks():
    s = initial_state("s").with_stat("consecutive_rejections", 4.0)
    s = s.with_stat("consecutive_fixation", 2.0)
    out = apply_transition(
        s,
        CandidateAction("pause", kind=ActionKind.FALLBACK_REF,
                        source=ActionSource.FALLBACK_LIBRARY, fallback_id="x"),
        frozenset(),
        reset_counters=True,
    )
    assert out.stat("consecutive_rejections") == 0.0
    assert out.stat("consecutive_fixation") == 0.0


def test_regeneration_counter_resets_at_turn_boundary():
    s = initial_state("s").with_stat("regeneration_count_this_turn", 2.0)
    out = apply_transition(s, CandidateAction("hi"), frozenset())
    assert out.stat("regeneration_count_this_turn") == 0.0


def test_exogenous_tags_are_replaced_not_merged():
    s = initial_state("s")
    s = apply_transition(s, CandidateAction("a"), frozenset({"one"}))
    s = apply_transition(s, CandidateAction("b"), frozenset({"two"}))
    assert s.exogenous_tags == frozenset({"two"})


def test_user_turns_do_not_advance_turn_index():
    s = initial_state("s")
    s = record_user_turn(s, "hi", frozenset({"x"}))
    assert s.turn_index == 0
    assert len(s.history) == 1
    assert s.exogenous_tags == frozenset({"x"})


def test_turn_index_invariant_enforced():
    with pytest.raises(ValueError):
        InteractionState(
            session_id="s",
            turn_index=2,
            history=(Turn(Speaker.AGENT, "x", 0),),
        )


def test_counters_must_be_finite_and_nonnegative():
    with pytest.raises(ValueError):
        InteractionState(session_id="s", trajectory_stats={"bad": -1.0})
    with pytest.raises(ValueError):
        InteractionState(session_id="s", trajectory_stats={"bad": float("nan")})


def test_digest_deterministic_for_equal_states():
    assert state_digest(golden_state()) == state_digest(golden_state())


def test_digest_sensitive_to_extra_turn():
    s = golden_state()
    s2 = apply_transition(s, CandidateAction("one more"), frozenset())
    assert state_digest(s) != state_digest(s2)


def test_digest_matches_frozen_golden():
    assert state_digest(golden_state()) == GOLDEN_DIGEST


def test_canonical_json_field_order():
    doc = canonical_state_json(golden_state())
    first = doc.index('"session_id"')
    assert first < doc.index('"turn_index"') < doc.index('"history"')
    assert doc.index('"history"') < doc.index('"feature_cache"')
    assert doc.index('"feature_cache"') < doc.index('"trajectory_stats"')
    assert doc.index('"trajectory_stats"') < doc.index('"active_mode"')
    assert doc.index('"active_mode"') < doc.index('"exogenous_tags"')


def test_candidate_action_invariants():
    with pytest.raises(ValueError):
        CandidateAction("x", generation_attempt=-1)
    with pytest.raises(ValueError):
        CandidateAction("x", kind=ActionKind.MODE_SWITCH)
    with pytest.raises(ValueError):
        CandidateAction("x", kind=ActionKind.FALLBACK_REF)


@given(
    texts=st.lists(st.text(alphabet="abc xyz'", max_size=20), min_size=1, max_size=6),
    tags=st.lists(st.sampled_from(["fixation", "calm", "media_noise"]), max_size=2),
)
def test_trajectory_reconstruction_reproduces_digests(texts, tags):
    tagset = frozenset(tags)
    actions = [CandidateAction(t) for t in texts]
    s1 = initial_state("replay")
    s2 = initial_state("replay")
    digests = []
    for action in actions:
        s1 = apply_transition(s1, action, tagset)
        digests.append(state_digest(s1))
    for action, expected in zip(actions, digests):
        s2 = apply_transition(s2, action, tagset)
        assert state_digest(s2) == expected


def test_states_are_values_not_mutated():
    s = initial_state("s")
    before = dataclasses.asdict(s)
    apply_transition(s, CandidateAction("hi"), frozenset({"t"}))
    record_user_turn(s, "hello", frozenset({"u"}))
    assert dataclasses.asdict(s) == before
