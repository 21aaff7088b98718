from __future__ import annotations

from pathlib import Path

import pytest

from guardloop.conditions import Clause
from guardloop.overlays import Overlay, RigidityPolicy
from guardloop.state import initial_state, record_user_turn

ASSETS = Path(__file__).resolve().parents[1] / "src" / "guardloop" / "assets"
SCENARIOS = ASSETS / "scenarios"
FIXTURES = Path(__file__).resolve().parent / "fixtures"

FRUSTRATED_USER = "Ugh, this is so frustrating, I'm really annoyed and upset right now."


def make_empathy_overlay(epsilon: float = 0.05, phi: float = 0.5, tau: float = 0.5) -> Overlay:
    """The worked-example overlay: empathy floor guarded by frustration."""
    return Overlay(
        id="empathy_ack",
        kind="prohibitory",
        activation=(Clause("feature", "frustration_keywords", ">=", phi),),
        constraint=Clause("feature", "empathy_lexicon", ">=", tau),
        rigidity=RigidityPolicy(epsilon),
        severity_weight=0.9,
    )


@pytest.fixture
def frustrated_state():
    state = initial_state("test-session")
    return record_user_turn(state, FRUSTRATED_USER, frozenset())


@pytest.fixture
def neutral_state():
    state = initial_state("test-session")
    return record_user_turn(state, "Hello, it is a quiet afternoon here.", frozenset())
