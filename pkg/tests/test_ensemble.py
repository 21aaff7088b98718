from __future__ import annotations

import json
import random

import pytest

from conftest import make_empathy_overlay
from guardloop.ensemble import (
    ArbitrationRule,
    DisagreementAction,
    OverlayUpdate,
    apply_overlay_update,
    arbitrate,
    parse_arbitration_rule,
)
from guardloop.errors import ValidationError
from guardloop.features import builtin_feature_names, scalar
from guardloop.observer import (
    AdmissibleSet,
    JudgedCandidate,
    ObserverLimits,
    judge,
)
from guardloop.overlays import OverlayVerdict, serialize_overlay_set
from guardloop.state import CandidateAction, initial_state, record_user_turn

NAMES = builtin_feature_names()


def make_adm(n: int, admissible: set[int]) -> AdmissibleSet:
    candidates = []
    for i in range(n):
        ok = i in admissible
        verdict = OverlayVerdict(
            overlay_id="t", activated=True, deviation=0.0 if ok else 1.0,
            admissible=ok, descriptor="synthetic", effective_epsilon=0.0,
            confidence=1.0,
        )
        candidates.append(
            JudgedCandidate(CandidateAction(f"c{i}"), (verdict,), 1.0, {})
        )
    return AdmissibleSet(tuple(candidates), tuple(sorted(admissible)))


CONSERVATIVE = ArbitrationRule("conservative_intersection")
MAJORITY = ArbitrationRule("majority_vote")


def test_intersection_oracle_example():
    per = [(make_adm(3, {0, 1}), None), (make_adm(3, {1}), None), (make_adm(3, {1, 2}), None)]
    joint, disagreement = arbitrate(per, CONSERVATIVE)
    assert joint == (1,)
    assert disagreement


def test_unanimity_no_disagreement():
    per = [(make_adm(2, {0}), None)] * 3
    joint, disagreement = arbitrate(per, CONSERVATIVE)
    assert joint == (0,)
    assert not disagreement


def test_majority_two_of_three():
    per = [(make_adm(1, {0}), None), (make_adm(1, {0}), None), (make_adm(1, set()), None)]
    joint, _ = arbitrate(per, MAJORITY)
    assert joint == (0,)


def test_weighted_score_threshold():
    rule = ArbitrationRule("weighted_score", weights=(0.7, 0.3), pass_threshold=0.6)
    per = [(make_adm(2, {0}), None), (make_adm(2, {1}), None)]
    joint, disagreement = arbitrate(per, rule)
    assert joint == (0,)  # weight 0.7 >= 0.6; index 1 only earns 0.3
    assert disagreement


@pytest.mark.parametrize(
    "rule",
    [CONSERVATIVE, MAJORITY, ArbitrationRule("weighted_score", weights=(1.0,), pass_threshold=0.5)],
)
def test_single_member_degeneracy(rule):
    member = make_adm(4, {1, 3})
    joint, disagreement = arbitrate([(member, None)], rule)
    assert joint == (1, 3)
    assert not disagreement


def test_intersection_soundness_random():
    rng = random.Random(7)
    for _ in range(300):
        n = rng.randint(1, 5)
        sets = [set(rng.sample(range(n), rng.randint(0, n))) for _ in range(3)]
        per = [(make_adm(n, s), None) for s in sets]
        joint, _ = arbitrate(per, CONSERVATIVE)
        assert set(joint) == sets[0] & sets[1] & sets[2]
        for s in sets:
            assert set(joint) <= s


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        ArbitrationRule("weighted_score", weights=(0.5, 0.2))


def test_mismatched_candidate_lists_rejected():
    with pytest.raises(ValueError):
        arbitrate([(make_adm(2, {0}), None), (make_adm(3, {0}), None)], CONSERVATIVE)


def test_parse_arbitration_rule_block():
    rule = parse_arbitration_rule({
        "kind": "weighted_score",
        "weights": [0.6, 0.4],
        "pass_threshold": 0.5,
        "disagreement_action": {"kind": "fallback", "id": "neutral_ack"},
    })
    assert rule.kind == "weighted_score"
    assert rule.disagreement_action.fallback_id == "neutral_ack"
    with pytest.raises(ValidationError):
        parse_arbitration_rule({"kind": "nonsense"})


def test_disagreement_action_validation():
    with pytest.raises(ValueError):
        DisagreementAction("fallback")
    with pytest.raises(ValueError):
        DisagreementAction("ask_clarify")


# -- overlay hot-swap ----------------------------------------------------------


def frustrated_features_state():
    state = initial_state("hs")
    return record_user_turn(
        state, "Ugh, this is so frustrating, I'm really annoyed and upset right now.",
        frozenset(),
    )


def test_set_epsilon_session_update_rejects_near_miss():
    # Tightening the worked-example overlay to eps=0.01 must reject the
    # deviation-0.03 candidate that eps=0.05 admitted.
    overlays = [make_empathy_overlay(epsilon=0.05)]
    state = frustrated_features_state()
    near = CandidateAction("I'm sorry you're feeling that way, that sounds tough to carry.")
    # empathy 0.8 is far above; craft a 0.47-style case via direct check
    limits = ObserverLimits()
    adm, reason = judge([near], state, overlays, limits)
    assert reason is None

    updated = apply_overlay_update(
        overlays, OverlayUpdate(op="set_epsilon", overlay_id="empathy_ack", value=0.01), NAMES
    )
    assert updated[0].rigidity.base_epsilon == 0.01
    # original list untouched (session-temporary semantics)
    assert overlays[0].rigidity.base_epsilon == 0.05

    from guardloop.overlays import evaluate

    feats = {
        "frustration_keywords": scalar("frustration_keywords", 0.82),
        "empathy_lexicon": scalar("empathy_lexicon", 0.47),
    }
    assert evaluate(overlays[0], feats).admissible
    assert not evaluate(updated[0], feats).admissible


def test_remove_nonexistent_overlay_is_validation_error():
    with pytest.raises(ValidationError):
        apply_overlay_update([make_empathy_overlay()],
                             OverlayUpdate(op="remove", overlay_id="ghost"), NAMES)


def test_add_then_remove_is_identity():
    base = [make_empathy_overlay()]
    new_overlay = json.dumps({"overlays": [{
        "id": "extra", "kind": "prohibitory",
        "constraint": {"feature": "verbosity_ratio", "op": "<=", "threshold": 0.5},
        "rigidity": {"epsilon": 0.1}, "weight": 0.5}]})
    added = apply_overlay_update(base, OverlayUpdate(op="add", overlay_json=new_overlay), NAMES)
    assert [ov.id for ov in added] == ["empathy_ack", "extra"]
    removed = apply_overlay_update(added, OverlayUpdate(op="remove", overlay_id="extra"), NAMES)
    assert removed == base


def test_add_duplicate_id_rejected():
    base = [make_empathy_overlay()]
    dup = serialize_overlay_set(base)
    with pytest.raises(ValidationError):
        apply_overlay_update(base, OverlayUpdate(op="add", overlay_json=dup), NAMES)


def test_set_threshold_updates_constraint():
    updated = apply_overlay_update(
        [make_empathy_overlay()],
        OverlayUpdate(op="set_threshold", overlay_id="empathy_ack", value=0.7),
        NAMES,
    )
    assert updated[0].constraint.value == 0.7


def test_persistent_update_rewrites_file_atomically(tmp_path):
    from guardloop.overlays import parse_overlay_set

    path = tmp_path / "pack.json"
    base = [make_empathy_overlay()]
    path.write_text(serialize_overlay_set(base, pack_id="p"))
    apply_overlay_update(
        base,
        OverlayUpdate(op="set_epsilon", overlay_id="empathy_ack", value=0.2),
        NAMES,
        persist_path=str(path),
        pack_id="p",
    )
    reloaded = parse_overlay_set(path.read_text(), NAMES)
    assert reloaded[0].rigidity.base_epsilon == 0.2
    assert not list(tmp_path.glob("*.tmp"))
