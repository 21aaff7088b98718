from __future__ import annotations

import json

import pytest

from conftest import SCENARIOS
from guardloop.errors import InvariantViolation
from guardloop.harness import (
    TrajectoryLog,
    config_digest,
    load_scenario,
    log_digest,
    metrics,
    metrics_from_records,
    replay,
    run_scenario,
)

ALL_SCENARIOS = sorted(p.stem for p in SCENARIOS.glob("*.json"))


def run(name):
    return run_scenario(load_scenario(SCENARIOS / f"{name}.json"))


@pytest.mark.parametrize("name", ALL_SCENARIOS)
def test_replay_succeeds_for_every_shipped_scenario(name):
    log = run(name)
    report = replay(log)
    assert report["turns_verified"] == len(log.records)


@pytest.mark.parametrize("name", ALL_SCENARIOS)
def test_golden_digests_match(name):
    scenario = load_scenario(SCENARIOS / f"{name}.json")
    assert scenario.expected_digest, "shipped scenarios carry golden digests"
    log = run_scenario(scenario)  # raises on golden mismatch
    assert log_digest(log) == scenario.expected_digest


def test_empathy_regen_trace_structure():
    log = run("empathy_regen")
    record = log.records[0]
    assert record["disposition"]["kind"] == "execute"
    assert record["attempts_used"] == 1
    assert record["policy_calls"] == 2
    forced = [a["feedback"] for a in record["attempts"]
              if a["feedback"] and a["feedback"]["strength"] == "forced"]
    assert len(forced) == 1
    # attempt 0 rejected on the empathy floor, attempt 1 executed
    assert record["attempts"][0]["rejection_reason"] == "empty_admissible_set"
    assert record["attempts"][1]["rejection_reason"] is None


def test_byte_identical_logs_across_runs():
    for name in ("empathy_regen", "reset_mode_switch", "lookahead_redirect"):
        assert run(name).to_jsonl() == run(name).to_jsonl()


def test_gated_turns_make_zero_policy_calls():
    log = run("gating_skip")
    gated = [r for r in log.records if not r["gate"]["engage"]]
    assert len(gated) == 2
    assert all(r["policy_calls"] == 0 for r in gated)
    assert all(r["gate"]["reason"] == "co_present_conversation" for r in gated)
    engaged = [r for r in log.records if r["gate"]["engage"]]
    assert engaged[0]["policy_calls"] == 1


def test_metrics_regen_rate_for_empathy_regen():
    log = run("empathy_regen")
    m = metrics(log)
    assert m["regenerations"] == 1
    assert m["engaged_turns"] == 1
    assert m["regen_rate"] == 1.0


def test_metrics_zero_violations_when_all_admissible():
    log = run("reset_mode_switch")
    m = metrics(log)
    assert m["violation_attempts"] == 0
    assert m["fallbacks"] == 0


def test_metrics_fallback_rate_manual_count_oracle():
    # hand-built 5-turn record list with 2 fallback dispositions
    def rec(kind):
        return {
            "type": "turn",
            "gate": {"engage": True, "reason": None},
            "mode_switch": None,
            "attempts": [],
            "disposition": {"kind": kind, "execute_index": None, "fallback_id": None},
            "attempts_used": 0,
            "policy_calls": 1,
        }

    records = [rec("execute"), rec("fallback"), rec("execute"), rec("fallback"), rec("execute")]
    m = metrics_from_records(records)
    assert m["fallback_rate"] == pytest.approx(0.4)


def test_metrics_match_embedded_summary():
    log = run("smalltalk_drift")
    assert metrics(log) == log.summary["metrics"]


def test_log_round_trip_through_jsonl():
    log = run("empathy_regen")
    text = log.to_jsonl()
    parsed = TrajectoryLog.from_jsonl(text)
    assert parsed.header == log.header
    assert parsed.records == log.records
    assert parsed.summary == log.summary
    assert parsed.to_jsonl() == text


def test_tampered_record_breaks_replay_naming_turn():
    log = run("reset_mode_switch")
    log.records[2]["executed"]["content"] = "tampered text"
    with pytest.raises(InvariantViolation) as err:
        replay(log)
    assert err.value.turn_index == 2


def test_broken_digest_chain_detected():
    log = run("reset_mode_switch")
    log.records[1]["prev_digest"] = "0" * 16
    with pytest.raises(InvariantViolation) as err:
        replay(log)
    assert err.value.turn_index == 1


def test_inadmissible_execution_detected_by_replay():
    log = run("empathy_regen")
    # swap the executed empathic reply for the rejected flat one
    flat = log.records[0]["attempts"][0]["candidates"][0]["content"]
    log.records[0]["executed"]["content"] = flat
    with pytest.raises(InvariantViolation):
        replay(log)


def test_golden_digest_mismatch_raises(tmp_path):
    doc = json.loads((SCENARIOS / "empathy_regen.json").read_text())
    doc["expected_digest"] = "f" * 64
    path = tmp_path / "bad_golden.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InvariantViolation):
        run_scenario(load_scenario(path))


def test_config_digest_stable_and_embedded():
    scenario = load_scenario(SCENARIOS / "empathy_regen.json")
    log = run_scenario(scenario)
    assert log.header["config_digest"] == config_digest(scenario.resolved_config)
    assert log.header["config"]["default_pack"] == "empathy_ack"


def test_overrides_replace_default_pack(tmp_path):
    overlays = SCENARIOS.parent / "overlays" / "strict_brevity.json"
    scenario = load_scenario(
        SCENARIOS / "smalltalk_drift.json", overlays_override=str(overlays)
    )
    assert scenario.config.default_pack == "strict_brevity"


def test_forward_invariance_on_drift_scenarios():
    """No logged executed action carries an inadmissible verdict on the
    shipped drift scenarios (per-turn admissibility of what ran)."""
    for name in ("smalltalk_drift", "reset_mode_switch", "empathy_regen"):
        log = run(name)
        for record in log.records:
            if not record["disposition"] or record["disposition"]["kind"] != "execute":
                continue
            final_attempt = record["attempts"][-1]
            executed = final_attempt["candidates"][record["disposition"]["execute_index"]]
            assert all(v["admissible"] for v in executed["verdicts"]), (name, record["ordinal"])


def test_ensemble_defer_executes_no_utterance():
    log = run("ensemble_defer")
    record = log.records[0]
    assert record["ensemble_disagreement"] is True
    assert record["disposition"]["kind"] == "defer"
    assert record["executed"]["kind"] == "silence"
    assert record["executed"]["content"] == ""


def test_reset_scenario_modes_and_packs():
    log = run("reset_mode_switch")
    modes = [r["mode"] for r in log.records]
    assert modes == ["smalltalk", "smalltalk", "smalltalk", "breathing", "breathing"]
    switch_record = log.records[3]
    assert switch_record["mode_switch"]["target"] == "breathing"
    assert switch_record["mode_switch"]["admissible"] is True

    pack_overlays = {
        pack_id: {ov["id"] for ov in doc["overlays"]}
        for pack_id, doc in log.header["config"]["overlay_packs"].items()
    }
    mode_to_pack = {
        m["id"]: m["overlay_pack"] for m in log.header["config"]["supervisor"]["modes"]
    }
    for record in log.records:
        allowed = pack_overlays[mode_to_pack[record["mode"]]]
        for attempt in record["attempts"]:
            for cand in attempt["candidates"]:
                seen = {v["overlay_id"] for v in cand["verdicts"]}
                assert seen <= allowed, (record["ordinal"], seen, allowed)


def test_remote_fixture_policy_matches_scripted(tmp_path):
    """Adapter transparency at the harness level: a fixture-backed
    remote policy emitting the scripted text yields the same judged
    outcome for the turn."""
    empathic = ("I'm sorry this has been so frustrating; that sounds really hard, "
                "and I understand why you feel stuck.")
    fixture = tmp_path / "fixture.json"
    fixture.write_text(json.dumps(
        {"status": 200, "body": {"choices": [{"message": {"content": empathic}}]}}
    ))
    base = json.loads((SCENARIOS / "empathy_regen.json").read_text())
    scripted_doc = dict(base, id="transparency_scripted",
                        policy={"type": "scripted", "script": {"0:0": empathic}})
    remote_doc = dict(base, id="transparency_remote",
                      policy={"type": "remote_fixture", "fixture": "fixture.json"})
    for doc in (scripted_doc, remote_doc):
        doc.pop("expected_digest", None)
        doc["engine"] = dict(doc["engine"])
        doc["engine"]["overlay_packs"] = {
            "empathy_ack": json.loads(
                (SCENARIOS.parent / "overlays" / "empathy_ack.json").read_text()
            )
        }
        doc["engine"]["fallbacks"] = json.loads(
            (SCENARIOS.parent / "fallbacks" / "default.json").read_text()
        )
    (tmp_path / "s1.json").write_text(json.dumps(scripted_doc))
    (tmp_path / "s2.json").write_text(json.dumps(remote_doc))
    log_a = run_scenario(load_scenario(tmp_path / "s1.json"))
    log_b = run_scenario(load_scenario(tmp_path / "s2.json"))
    rec_a, rec_b = log_a.records[0], log_b.records[0]
    assert rec_a["executed"]["content"] == rec_b["executed"]["content"]
    assert rec_a["disposition"] == rec_b["disposition"]
    assert rec_a["attempts"][0]["candidates"][0]["verdicts"] == \
        rec_b["attempts"][0]["candidates"][0]["verdicts"]
