"""Feature extraction: (state, candidate) pairs to named values.

Extractors map the raw interaction state and a candidate action into the
structured representation that constraints are written against. The
shipped pack is entirely deterministic (lexicon and rule based) so every
downstream check is exact; model-backed extractors can plug in through
the same contract with confidence below 1.

Scoring conventions for the shipped pack:

* lexicon scores count *distinct* matched terms, divided by a small
  per-feature cap and clamped to [0, 1];
* ``verbosity_ratio`` is word count over a 60-word cap;
* ``negativity_running`` averages per-turn negativity over the last
  5 agent turns (fewer if the history is shorter);
* the two ``*_stub`` extractors read scenario-injected exogenous tags in
  place of real perception, and degrade to confidence 0.3 when the
  ``uncertain`` tag is present.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib.resources import files
from typing import Callable

from .errors import ExtractorFault
from .state import CandidateAction, InteractionState

EMPATHY_CAP = 5
FRUSTRATION_CAP = 4
NEGATIVITY_CAP = 4
VERBOSITY_CAP_WORDS = 60
NEGATIVITY_WINDOW = 5
REPETITION_WINDOW = 5

#: Confidence reported by tag stubs when the scenario marks perception
#: as unreliable.
DEGRADED_STUB_CONFIDENCE = 0.3

#: Synthetic per-candidate feature injected by the observer (not an
#: extractor): the candidate's action-class label, used by transfer
#: constraints.
ACTION_CLASS_FEATURE = "action_class"


class FeatureScope(str, Enum):
    TURN_LOCAL = "turn_local"
    TRAJECTORY_AGGREGATE = "trajectory_aggregate"


@dataclass(frozen=True)
class FeatureValue:
    name: str
    value: float | int | str
    scope: FeatureScope
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        if isinstance(self.value, bool):
            raise ValueError("feature values are scalars, counts, or labels")


def scalar(
    name: str,
    value: float,
    scope: FeatureScope = FeatureScope.TURN_LOCAL,
    confidence: float = 1.0,
) -> FeatureValue:
    """Scalar feature, clamped to [0, 1] before emission."""
    return FeatureValue(name, min(1.0, max(0.0, float(value))), scope, confidence)


def count(
    name: str,
    value: int,
    scope: FeatureScope = FeatureScope.TURN_LOCAL,
    confidence: float = 1.0,
) -> FeatureValue:
    return FeatureValue(name, max(0, int(value)), scope, confidence)


def label(
    name: str,
    value: str,
    scope: FeatureScope = FeatureScope.TURN_LOCAL,
    confidence: float = 1.0,
) -> FeatureValue:
    return FeatureValue(name, str(value), scope, confidence)


@dataclass(frozen=True)
class FeatureExtractor:
    """A pure extractor emitting exactly the feature it declares."""

    name: str
    scope: FeatureScope
    required_inputs: tuple[str, ...]
    fn: Callable[[InteractionState, CandidateAction], FeatureValue]

    def extract(self, state: InteractionState, action: CandidateAction) -> FeatureValue:
        return self.fn(state, action)


def extract_all(
    registry: list[FeatureExtractor],
    state: InteractionState,
    action: CandidateAction,
) -> dict[str, FeatureValue]:
    """Run every extractor; return one value per declared feature.

    A faulting extractor degrades to a confidence-0 value instead of
    aborting (uncertainty is a first-class signal downstream). Emitting
    a value under an undeclared name is a contract violation and raises.
    """
    seen: set[str] = set()
    for ex in registry:
        if ex.name in seen:
            raise ExtractorFault(ex.name, "duplicate extractor name in registry")
        seen.add(ex.name)

    out: dict[str, FeatureValue] = {}
    for ex in registry:
        try:
            value = ex.extract(state, action)
        except Exception:
            out[ex.name] = FeatureValue(ex.name, 0.0, ex.scope, 0.0)
            continue
        if value.name != ex.name:
            raise ExtractorFault(
                ex.name, f"emitted undeclared feature {value.name!r}"
            )
        if isinstance(value.value, float) and not 0.0 <= value.value <= 1.0:
            value = scalar(value.name, value.value, value.scope, value.confidence)
        out[ex.name] = value
    return out


# -- text utilities -------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z']+")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; apostrophes survive inside contractions."""
    return [t for t in (tok.strip("'") for tok in _TOKEN_RE.findall(text.lower())) if t]


@lru_cache(maxsize=None)
def load_lexicon(name: str) -> frozenset[str]:
    """Load a newline-delimited term list shipped under assets/lexicons."""
    path = files("guardloop").joinpath("assets", "lexicons", f"{name}.txt")
    terms = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    return frozenset(t for t in terms if t)


def lexicon_score(text: str, terms: frozenset[str], cap: int) -> float:
    """Distinct matched terms over ``cap``, clamped to [0, 1]."""
    matched = set(tokenize(text)) & terms
    return min(1.0, len(matched) / cap)


def turn_negativity(text: str) -> float:
    """Per-turn negativity of one agent utterance."""
    return lexicon_score(text, load_lexicon("negativity"), NEGATIVITY_CAP)


_STOPWORDS = frozenset(
    """a an the i you we they he she it is are was were be been am do does did
    to of in on at for with and or but not no yes this that these those my
    your our their so just very really what how why when where me him her us
    them its as if then than too also can could will would should may might
    have has had about from by up down out over under""".split()
)


def content_words(text: str) -> set[str]:
    return {t for t in tokenize(text) if t not in _STOPWORDS}


def _bigrams(tokens: list[str]) -> set[tuple[str, ...]]:
    if len(tokens) < 2:
        return {(t,) for t in tokens}
    return {(a, b) for a, b in zip(tokens, tokens[1:])}


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def _tag_reading(state: InteractionState, prefix: str) -> int | None:
    readings = []
    for tag in state.exogenous_tags:
        if tag.startswith(prefix + ":"):
            try:
                readings.append(int(tag.split(":", 1)[1]))
            except ValueError:
                continue
    return max(readings) if readings else None


def _stub_confidence(state: InteractionState) -> float:
    return DEGRADED_STUB_CONFIDENCE if "uncertain" in state.exogenous_tags else 1.0


# -- the shipped extractor pack ------------------------------------------


def _empathy(state: InteractionState, action: CandidateAction) -> FeatureValue:
    return scalar(
        "empathy_lexicon",
        lexicon_score(action.content, load_lexicon("empathy"), EMPATHY_CAP),
    )


def _frustration(state: InteractionState, action: CandidateAction) -> FeatureValue:
    last = state.last_user_turn()
    score = 0.0
    if last is not None:
        score = lexicon_score(last.text, load_lexicon("frustration"), FRUSTRATION_CAP)
    return scalar("frustration_keywords", score)


def _negativity_running(state: InteractionState, action: CandidateAction) -> FeatureValue:
    turns = state.agent_turns()[-NEGATIVITY_WINDOW:]
    score = 0.0
    if turns:
        score = sum(turn_negativity(t.text) for t in turns) / len(turns)
    return scalar("negativity_running", score, FeatureScope.TRAJECTORY_AGGREGATE)


def _verbosity(state: InteractionState, action: CandidateAction) -> FeatureValue:
    words = len(tokenize(action.content))
    return scalar("verbosity_ratio", words / VERBOSITY_CAP_WORDS)


def _repetition(state: InteractionState, action: CandidateAction) -> FeatureValue:
    cand = _bigrams(tokenize(action.content))
    best = 0.0
    for turn in state.agent_turns()[-REPETITION_WINDOW:]:
        best = max(best, _jaccard(cand, _bigrams(tokenize(turn.text))))
    return scalar("repetition_ngram", best, FeatureScope.TRAJECTORY_AGGREGATE)


def _topic_shift(state: InteractionState, action: CandidateAction) -> FeatureValue:
    last = state.last_user_turn()
    flag = 0.0
    if last is not None:
        user_words = content_words(last.text)
        cand_words = content_words(action.content)
        if user_words and cand_words and not (user_words & cand_words):
            flag = 1.0
    return scalar("topic_shift_flag", flag)


_ASSISTIVE_PHRASES = (
    "how may i help",
    "how can i help",
    "can i assist",
    "may i assist",
    "would you like",
    "do you want me to",
    "i can provide",
    "i can look up",
    "do you need",
    "i recommend",
    "you should",
    "let me know if you need",
)


def _assistive_motive(state: InteractionState, action: CandidateAction) -> FeatureValue:
    text = " ".join(tokenize(action.content))
    flag = 1.0 if any(p in text for p in _ASSISTIVE_PHRASES) else 0.0
    return scalar("assistive_motive_flag", flag)


def _person_count(state: InteractionState, action: CandidateAction) -> FeatureValue:
    reading = _tag_reading(state, "person_count")
    return count(
        "person_count_stub",
        1 if reading is None else reading,
        confidence=_stub_confidence(state),
    )


def _social_presence(state: InteractionState, action: CandidateAction) -> FeatureValue:
    # Co-present conversation dominates media noise when both are heard.
    tags = state.exogenous_tags
    if "conversation" in tags:
        presence = "conversation"
    elif "media_noise" in tags:
        presence = "media"
    else:
        presence = "quiet"
    return label("social_presence_stub", presence, confidence=_stub_confidence(state))


def builtin_extractors() -> list[FeatureExtractor]:
    """The deterministic shipped pack (9 extractors, unique names)."""
    t = FeatureScope.TURN_LOCAL
    a = FeatureScope.TRAJECTORY_AGGREGATE
    return [
        FeatureExtractor("empathy_lexicon", t, ("candidate.content",), _empathy),
        FeatureExtractor("frustration_keywords", t, ("state.history",), _frustration),
        FeatureExtractor("negativity_running", a, ("state.history",), _negativity_running),
        FeatureExtractor("verbosity_ratio", t, ("candidate.content",), _verbosity),
        FeatureExtractor("repetition_ngram", a, ("state.history", "candidate.content"), _repetition),
        FeatureExtractor("topic_shift_flag", t, ("state.history", "candidate.content"), _topic_shift),
        FeatureExtractor("assistive_motive_flag", t, ("candidate.content",), _assistive_motive),
        FeatureExtractor("person_count_stub", t, ("state.exogenous_tags",), _person_count),
        FeatureExtractor("social_presence_stub", t, ("state.exogenous_tags",), _social_presence),
    ]


def builtin_feature_names() -> set[str]:
    """Names valid in overlay and supervisor configs: the shipped pack
    plus the observer-injected action-class label."""
    return {ex.name for ex in builtin_extractors()} | {ACTION_CLASS_FEATURE}
