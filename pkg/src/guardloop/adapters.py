"""Base-policy adapters: deterministic scripts and a remote chat client.

The engine treats both identically — a policy produces exactly ``n``
candidates for a state (plus optional feedback) or raises
``BasePolicyUnavailable``. Scripts make tests and scenarios fully
deterministic; the remote adapter speaks a minimal chat-completion
subset (model, messages, n -> choices[].message.content) over an
injectable transport so the suite runs from recorded fixtures without
network access.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, TYPE_CHECKING

import requests

from .errors import BasePolicyUnavailable, RolloutPolicyUnavailable
from .state import ActionKind, ActionSource, CandidateAction, InteractionState

if TYPE_CHECKING:
    from .observer import FeedbackDirective

logger = logging.getLogger(__name__)

API_KEY_ENV = "GUARD_API_KEY"

#: Script entries may use these control tokens instead of utterance text.
CONTROL_TOKENS = {
    "<silence>": ActionKind.SILENCE,
    "<defer>": ActionKind.DEFER,
}


def _to_candidate(text: str, attempt: int) -> CandidateAction:
    kind = CONTROL_TOKENS.get(text.strip().lower())
    if kind is not None:
        return CandidateAction("", kind=kind, generation_attempt=attempt,
                               source=ActionSource.BASE_POLICY)
    return CandidateAction(text, generation_attempt=attempt,
                           source=ActionSource.BASE_POLICY)


@dataclass(frozen=True)
class ScriptedPolicy:
    """Pure lookup keyed by (turn_index, attempt); misses yield the
    default text. The attempt number is read from the state's
    regeneration counter, which the observer bumps between retries."""

    script: dict[tuple[int, int], str]
    default: str = "Okay."
    profile_id: str = "scripted"

    def sample(
        self,
        state: InteractionState,
        feedback: "FeedbackDirective | None",
        n: int,
    ) -> list[CandidateAction]:
        attempt = int(state.stat("regeneration_count_this_turn"))
        text = self.script.get((state.turn_index, attempt), self.default)
        candidates = [_to_candidate(text, attempt)]
        for i in range(1, n):
            candidates.append(_to_candidate(f"{text} (variant {i + 1})", attempt))
        return candidates


def scripted_sample(
    policy: ScriptedPolicy,
    state: InteractionState,
    feedback: "FeedbackDirective | None",
    n: int,
) -> list[CandidateAction]:
    """Functional form of ``ScriptedPolicy.sample``."""
    return policy.sample(state, feedback, n)


def parse_scripted_policy(raw: dict) -> ScriptedPolicy:
    """Build a scripted policy from scenario JSON.

    Script keys are ``"<turn>:<attempt>"`` strings.
    """
    script: dict[tuple[int, int], str] = {}
    for key, text in raw.get("script", {}).items():
        turn_str, _, attempt_str = key.partition(":")
        script[(int(turn_str), int(attempt_str or 0))] = str(text)
    return ScriptedPolicy(script=script, default=str(raw.get("default", "Okay.")))


@dataclass(frozen=True)
class CountingPolicy:
    """Wraps another policy and counts sample calls (test instrumentation)."""

    inner: object
    calls: list[int] = field(default_factory=lambda: [0])
    profile_id: str = "counting"

    def sample(self, state, feedback, n):
        self.calls[0] += 1
        return self.inner.sample(state, feedback, n)

    @property
    def call_count(self) -> int:
        return self.calls[0]


# -- scripted rollout policy (lookahead) ------------------------------------


@dataclass(frozen=True)
class ScriptedRolloutPolicy:
    """Deterministic rollout tree for lookahead tests and scenarios.

    ``followups`` maps the last agent utterance (or ``"*"``) to the
    simulated user's reply; ``replies`` maps that user text (or ``"*"``)
    to the agent candidates proposed next.
    """

    followups: dict[str, str]
    replies: dict[str, list[str]]
    followup_tags: dict[str, list[str]] = field(default_factory=dict)

    def user_followup(
        self, state: InteractionState, depth: int, rollout: int
    ) -> tuple[str, frozenset[str]]:
        last_agent = state.agent_turns()[-1].text if state.agent_turns() else ""
        text = self.followups.get(last_agent, self.followups.get("*"))
        if text is None:
            raise RolloutPolicyUnavailable(f"no scripted follow-up for {last_agent!r}")
        return text, frozenset(self.followup_tags.get(text, []))

    def agent_replies(
        self, state: InteractionState, depth: int, rollout: int
    ) -> list[CandidateAction]:
        last_user = state.last_user_turn()
        key = last_user.text if last_user else ""
        texts = self.replies.get(key, self.replies.get("*"))
        if not texts:
            raise RolloutPolicyUnavailable(f"no scripted replies for {key!r}")
        return [_to_candidate(t, 0) for t in texts]


def parse_rollout_policy(raw: dict) -> ScriptedRolloutPolicy:
    return ScriptedRolloutPolicy(
        followups={str(k): str(v) for k, v in raw.get("followups", {}).items()},
        replies={str(k): [str(t) for t in v] for k, v in raw.get("replies", {}).items()},
        followup_tags={str(k): list(v) for k, v in raw.get("followup_tags", {}).items()},
    )


# -- remote chat-completion adapter ------------------------------------------


Transport = Callable[[str, dict, dict, float], tuple[int, object]]
"""(url, headers, body, timeout) -> (status_code, parsed_json_body)"""


def _requests_transport(url: str, headers: dict, body: dict, timeout: float):
    try:
        response = requests.post(url, headers=headers, json=body, timeout=timeout)
    except requests.Timeout as exc:
        raise BasePolicyUnavailable("timeout") from exc
    except requests.RequestException as exc:
        raise BasePolicyUnavailable(f"transport: {exc}") from exc
    try:
        parsed = response.json()
    except ValueError:
        parsed = None
    return response.status_code, parsed


@dataclass(frozen=True)
class RemoteEndpoint:
    url: str
    model: str
    timeout_s: float = 30.0
    system_profile: str = "You are a considerate conversational agent."
    profile_id: str = "remote"
    transport: Transport = _requests_transport

    def sample(
        self,
        state: InteractionState,
        feedback: "FeedbackDirective | None",
        n: int,
    ) -> list[CandidateAction]:
        return remote_chat_sample(self, state, feedback, n)


def build_request_body(
    endpoint: RemoteEndpoint,
    state: InteractionState,
    feedback: "FeedbackDirective | None",
    n: int,
) -> dict:
    """Documented wire subset: {model, messages[{role, content}], n}.

    History maps user turns to 'user' and agent turns to 'assistant';
    pending forced feedback is injected as one extra system message so
    the user-visible transcript is never mutated.
    """
    messages: list[dict] = [{"role": "system", "content": endpoint.system_profile}]
    for turn in state.history:
        role = "user" if turn.role.value == "user" else "assistant"
        messages.append({"role": role, "content": turn.text})
    if feedback is not None:
        messages.append({"role": "system", "content": feedback.directive_text})
    return {"model": endpoint.model, "messages": messages, "n": n}


def remote_chat_sample(
    endpoint: RemoteEndpoint,
    state: InteractionState,
    feedback: "FeedbackDirective | None",
    n: int,
) -> list[CandidateAction]:
    """Issue one chat-completion request; map failures to
    ``BasePolicyUnavailable`` so the observer's fallback path handles
    timeouts, auth errors, and malformed responses identically."""
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = build_request_body(endpoint, state, feedback, n)

    status, parsed = endpoint.transport(endpoint.url, headers, body, endpoint.timeout_s)
    if status in (401, 403):
        raise BasePolicyUnavailable("auth")
    if status != 200:
        raise BasePolicyUnavailable(f"http {status}")
    if not isinstance(parsed, dict):
        raise BasePolicyUnavailable("malformed-response")
    choices = parsed.get("choices")
    if not isinstance(choices, list) or len(choices) < n:
        raise BasePolicyUnavailable("malformed-response")

    attempt = int(state.stat("regeneration_count_this_turn"))
    candidates: list[CandidateAction] = []
    for choice in choices[:n]:
        content = None
        if isinstance(choice, dict):
            message = choice.get("message")
            if isinstance(message, dict):
                content = message.get("content")
        if not isinstance(content, str):
            raise BasePolicyUnavailable("malformed-response")
        candidates.append(_to_candidate(content, attempt))
    return candidates


def fixture_transport(fixture_path: str) -> Transport:
    """A transport replaying one recorded response from disk.

    The fixture file holds ``{"status": int, "body": object}``; requests
    made through it are captured on the returned callable for
    assertions.
    """
    with open(fixture_path, encoding="utf-8") as handle:
        fixture = json.load(handle)

    captured: list[dict] = []

    def transport(url: str, headers: dict, body: dict, timeout: float):
        captured.append({"url": url, "headers": headers, "body": body})
        return int(fixture["status"]), fixture.get("body")

    transport.captured = captured  # type: ignore[attr-defined]
    return transport
