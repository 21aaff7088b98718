from __future__ import annotations

import dataclasses

import pytest

from conftest import FIXTURES, FRUSTRATED_USER, make_empathy_overlay
from guardloop.adapters import (
    RemoteEndpoint,
    ScriptedPolicy,
    fixture_transport,
    parse_scripted_policy,
    remote_chat_sample,
    scripted_sample,
)
from guardloop.errors import BasePolicyUnavailable
from guardloop.observer import (
    FeedbackDirective,
    FeedbackStrength,
    ObserverLimits,
    judge,
)
from guardloop.state import (
    ActionKind,
    ActionSource,
    CandidateAction,
    initial_state,
    record_user_turn,
)

REMOTE = FIXTURES / "remote"

EMPATHIC = "I'm sorry this has been so frustrating; that sounds really hard, and I understand why you feel stuck."
FLAT = "There are twelve regional hiking trails, and I can list all of them by length."


def forced_feedback():
    return FeedbackDirective(
        FeedbackStrength.FORCED,
        (("empathy_ack", "empathy_lexicon insufficient; deviation=0.50", 0.5),),
        "Regenerate: the previous candidate was rejected (empty_admissible_set).",
    )


# -- scripted policy -----------------------------------------------------------


def test_script_reproduces_regeneration_keys():
    policy = ScriptedPolicy(script={(0, 0): FLAT, (0, 1): EMPATHIC})
    state = initial_state("s")
    first = scripted_sample(policy, state, None, 1)
    assert first[0].content == FLAT
    retry_state = state.with_stat("regeneration_count_this_turn", 1.0)
    second = scripted_sample(policy, retry_state, forced_feedback(), 1)
    assert second[0].content == EMPATHIC
    assert second[0].generation_attempt == 1


def test_script_miss_returns_default():
    policy = ScriptedPolicy(script={}, default="fallback text")
    out = scripted_sample(policy, initial_state("s"), None, 1)
    assert out[0].content == "fallback text"


def test_script_arity_contract_with_variants():
    policy = ScriptedPolicy(script={(0, 0): "base text"})
    out = scripted_sample(policy, initial_state("s"), None, 3)
    assert len(out) == 3
    assert len({c.content for c in out}) == 3
    assert out[0].content == "base text"
    assert all(c.generation_attempt == 0 for c in out)


def test_control_tokens_become_control_actions():
    policy = ScriptedPolicy(script={(0, 0): "<silence>", (0, 1): "<defer>"})
    state = initial_state("s")
    assert scripted_sample(policy, state, None, 1)[0].kind is ActionKind.SILENCE
    retry = state.with_stat("regeneration_count_this_turn", 1.0)
    assert scripted_sample(policy, retry, None, 1)[0].kind is ActionKind.DEFER


def test_parse_scripted_policy_keys():
    policy = parse_scripted_policy({"script": {"0:0": "a", "2:1": "b"}, "default": "d"})
    assert policy.script[(0, 0)] == "a"
    assert policy.script[(2, 1)] == "b"
    assert policy.default == "d"


# -- remote adapter -------------------------------------------------------------


def endpoint(fixture: str) -> RemoteEndpoint:
    return RemoteEndpoint(
        url="https://example.invalid/v1/chat/completions",
        model="fixture-model",
        transport=fixture_transport(str(REMOTE / fixture)),
    )


def test_fixture_pass_through_yields_candidates():
    state = record_user_turn(initial_state("s"), FRUSTRATED_USER, frozenset())
    out = remote_chat_sample(endpoint("completions_ok.json"), state, None, 2)
    assert len(out) == 2
    assert all(c.source is ActionSource.BASE_POLICY for c in out)
    assert out[0].content == EMPATHIC


def test_http_500_maps_to_base_policy_unavailable():
    with pytest.raises(BasePolicyUnavailable):
        remote_chat_sample(endpoint("http_500.json"), initial_state("s"), None, 1)


def test_auth_failure_maps_to_base_policy_unavailable():
    with pytest.raises(BasePolicyUnavailable) as err:
        remote_chat_sample(endpoint("auth_denied.json"), initial_state("s"), None, 1)
    assert err.value.reason == "auth"


def test_malformed_response_maps_to_base_policy_unavailable():
    with pytest.raises(BasePolicyUnavailable) as err:
        remote_chat_sample(endpoint("malformed.json"), initial_state("s"), None, 1)
    assert err.value.reason == "malformed-response"


def test_forced_feedback_text_in_request_body():
    # request-capture oracle against the documented body schema
    ep = endpoint("completions_ok.json")
    state = record_user_turn(initial_state("s"), FRUSTRATED_USER, frozenset())
    feedback = forced_feedback()
    remote_chat_sample(ep, state, feedback, 1)
    captured = ep.transport.captured[-1]
    body = captured["body"]
    assert body["model"] == "fixture-model"
    assert body["n"] == 1
    roles = [m["role"] for m in body["messages"]]
    assert roles[0] == "system"
    assert roles[-1] == "system"
    assert body["messages"][-1]["content"] == feedback.directive_text
    assert body["messages"][1] == {"role": "user", "content": FRUSTRATED_USER}


def test_api_key_env_sets_bearer_header(monkeypatch):
    ep = endpoint("completions_ok.json")
    monkeypatch.setenv("GUARD_API_KEY", "sekrit")
    remote_chat_sample(ep, initial_state("s"), None, 1)
    headers = ep.transport.captured[-1]["headers"]
    assert headers["Authorization"] == "Bearer sekrit"


def test_no_feedback_means_no_extra_system_message():
    ep = endpoint("completions_ok.json")
    state = record_user_turn(initial_state("s"), "hi", frozenset())
    remote_chat_sample(ep, state, None, 1)
    body = ep.transport.captured[-1]["body"]
    assert [m["role"] for m in body["messages"]] == ["system", "user"]


def test_adapter_transparency_same_texts_same_judgment():
    """Scripted and fixture-backed remote policies emitting the same
    text must produce identical admissibility outcomes."""
    state = record_user_turn(initial_state("s"), FRUSTRATED_USER, frozenset())
    overlays = [make_empathy_overlay()]
    limits = ObserverLimits()

    scripted = ScriptedPolicy(script={(0, 0): EMPATHIC})
    from_script = scripted.sample(state, None, 1)
    from_remote = remote_chat_sample(endpoint("completions_ok.json"), state, None, 1)
    assert from_script[0].content == from_remote[0].content

    adm_a, reason_a = judge(from_script, state, overlays, limits)
    adm_b, reason_b = judge(from_remote, state, overlays, limits)
    assert reason_a is None and reason_b is None
    assert adm_a.candidates[0].verdicts == adm_b.candidates[0].verdicts
