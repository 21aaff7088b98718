"""Scenario runner, trajectory logging, metrics, and replay audit.

A scenario is a scripted multi-turn interaction run through the full
stack. The run emits a JSONL trajectory log whose records chain state
digests, so any later tampering is detectable and the whole trajectory
can be reconstructed and re-verified from the log alone (the resolved
engine config is embedded in the header).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from . import __version__
from .adapters import (
    RemoteEndpoint,
    ScriptedPolicy,
    ScriptedRolloutPolicy,
    fixture_transport,
    parse_rollout_policy,
    parse_scripted_policy,
)
from .engine import Engine, EngineConfig, EnsembleMember, EnsembleSpec, TurnResult
from .ensemble import parse_arbitration_rule
from .errors import InvariantViolation, ValidationError
from .features import (
    ACTION_CLASS_FEATURE,
    builtin_extractors,
    builtin_feature_names,
    extract_all,
    label,
)
from .lookahead import LookaheadConfig
from .observer import (
    DispositionKind,
    FallbackLibrary,
    ObserverLimits,
    parse_fallback_library,
)
from .overlays import Overlay, evaluate_pack, parse_overlay_set
from .state import (
    ActionKind,
    ActionSource,
    CandidateAction,
    InteractionState,
    apply_transition,
    initial_state,
    record_user_turn,
    state_digest,
)
from .supervisor import parse_supervisor_config

logger = logging.getLogger(__name__)

_LIMIT_KEYS = (
    "regen_bound",
    "conf_threshold",
    "conflict_threshold",
    "implicit_margin",
    "candidates_per_sample",
)


@dataclass(frozen=True)
class Scenario:
    id: str
    user_turns: tuple[tuple[str, frozenset[str]], ...]
    policy: object
    rollout_policy: ScriptedRolloutPolicy | None
    config: EngineConfig
    resolved_config: dict
    expected_digest: str | None = None


@dataclass
class TrajectoryLog:
    header: dict
    records: list[dict]
    summary: dict

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header, separators=(",", ":"))]
        lines += [json.dumps(r, separators=(",", ":")) for r in self.records]
        lines.append(json.dumps(self.summary, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrajectoryLog":
        header: dict | None = None
        records: list[dict] = []
        summary: dict | None = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvariantViolation(f"log line {lineno} is not valid JSON: {exc.msg}")
            kind = obj.get("type")
            if kind == "header":
                header = obj
            elif kind == "turn":
                records.append(obj)
            elif kind == "summary":
                summary = obj
            else:
                raise InvariantViolation(f"log line {lineno} has unknown type {kind!r}")
        if header is None or summary is None:
            raise InvariantViolation("log is missing its header or summary line")
        return cls(header, records, summary)


def log_digest(log: TrajectoryLog) -> str:
    return hashlib.sha256(log.to_jsonl().encode("utf-8")).hexdigest()


# -- config resolution -------------------------------------------------------


def _load_json(path: Path) -> object:
    return json.loads(path.read_text(encoding="utf-8"))


def _inline(value: object, base_dir: Path) -> object:
    """Resolve a path reference into its parsed JSON document."""
    if isinstance(value, str):
        return _load_json((base_dir / value).resolve())
    return value


def resolve_config_dict(
    raw: dict,
    base_dir: Path,
    *,
    overlays_override: str | None = None,
    supervisor_override: str | None = None,
    fallbacks_override: str | None = None,
) -> dict:
    """Inline every file reference so the config is self-contained."""
    raw = dict(raw)
    packs: dict[str, object] = {}
    for pack_id, ref in (raw.get("overlay_packs") or {}).items():
        packs[pack_id] = _inline(ref, base_dir)
    if overlays_override:
        path = Path(overlays_override)
        pack_id = path.stem
        packs[pack_id] = _load_json(path.resolve())
        raw["default_pack"] = pack_id
    if not packs:
        raise ValidationError("<engine>", "at least one overlay pack is required")

    default_pack = raw.get("default_pack")
    if default_pack is None:
        default_pack = next(iter(packs))
    if default_pack not in packs:
        raise ValidationError(str(default_pack), "default_pack is not a configured pack")

    fallbacks_ref = fallbacks_override or raw.get("fallbacks")
    if fallbacks_ref is None:
        fallbacks = _load_json(shipped_asset("fallbacks", "default.json"))
    else:
        fallbacks = _inline(fallbacks_ref, base_dir)

    supervisor = None
    supervisor_ref = supervisor_override or raw.get("supervisor")
    if supervisor_ref is not None:
        supervisor = _inline(supervisor_ref, base_dir)

    resolved = {
        "overlay_packs": packs,
        "default_pack": default_pack,
        "fallbacks": fallbacks,
        "supervisor": supervisor,
        "limits": dict(raw.get("limits") or {}),
        "lookahead": raw.get("lookahead"),
        "rollout_policy": raw.get("rollout_policy"),
        "ensemble": raw.get("ensemble"),
        "permissive_relaxation": bool(raw.get("permissive_relaxation", True)),
    }
    return resolved


def config_from_resolved(resolved: dict) -> EngineConfig:
    """Build the runtime config from a self-contained config dict."""
    names = builtin_feature_names()
    packs: dict[str, list[Overlay]] = {}
    for pack_id, doc in resolved["overlay_packs"].items():
        packs[pack_id] = parse_overlay_set(json.dumps(doc), names)

    fallbacks = parse_fallback_library(json.dumps(resolved["fallbacks"]))

    supervisor = None
    if resolved.get("supervisor") is not None:
        supervisor = parse_supervisor_config(json.dumps(resolved["supervisor"]), names)
        for mode in supervisor.modes:
            if mode.overlay_pack not in packs:
                raise ValidationError(
                    mode.id, f"mode references unknown overlay pack {mode.overlay_pack!r}"
                )

    limits_raw = resolved.get("limits") or {}
    unknown = set(limits_raw) - set(_LIMIT_KEYS)
    if unknown:
        raise ValidationError("<limits>", f"unknown limit keys: {sorted(unknown)}")
    try:
        limits = ObserverLimits(**limits_raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError("<limits>", str(exc)) from exc

    lookahead = None
    if resolved.get("lookahead") is not None:
        try:
            lookahead = LookaheadConfig(**resolved["lookahead"])
        except (TypeError, ValueError) as exc:
            raise ValidationError("<lookahead>", str(exc)) from exc

    ensemble = None
    if resolved.get("ensemble") is not None:
        ensemble = _parse_ensemble(resolved["ensemble"], packs, limits)

    return EngineConfig(
        overlay_packs=packs,
        default_pack=resolved["default_pack"],
        fallbacks=fallbacks,
        limits=limits,
        supervisor=supervisor,
        lookahead=lookahead,
        ensemble=ensemble,
        permissive_relaxation=resolved.get("permissive_relaxation", True),
    )


def _parse_ensemble(
    raw: object, packs: dict[str, list[Overlay]], shared: ObserverLimits
) -> EnsembleSpec:
    if not isinstance(raw, dict) or not isinstance(raw.get("observers"), list):
        raise ValidationError("<ensemble>", "ensemble config needs an 'observers' list")
    members: list[EnsembleMember] = []
    for idx, member_raw in enumerate(raw["observers"]):
        position = f"observer[{idx}]"
        if not isinstance(member_raw, dict):
            raise ValidationError(position, "observer must be an object")
        pack_id = member_raw.get("overlay_pack")
        if pack_id not in packs:
            raise ValidationError(position, f"unknown overlay pack {pack_id!r}")
        member_limits = ObserverLimits(
            regen_bound=shared.regen_bound,
            conf_threshold=float(member_raw.get("conf_threshold", shared.conf_threshold)),
            conflict_threshold=float(
                member_raw.get("conflict_threshold", shared.conflict_threshold)
            ),
            implicit_margin=shared.implicit_margin,
            candidates_per_sample=shared.candidates_per_sample,
        )
        members.append(EnsembleMember(pack_id, member_limits))
    if not members:
        raise ValidationError("<ensemble>", "ensemble needs at least one observer")
    rule = parse_arbitration_rule(raw.get("rule"))
    weights = rule.weights
    if rule.kind == "weighted_score" and weights is not None and len(weights) != len(members):
        raise ValidationError("<ensemble>", "one weight per observer required")
    return EnsembleSpec(tuple(members), rule)


def shipped_asset(*parts: str) -> Path:
    from importlib.resources import files

    return Path(str(files("guardloop").joinpath("assets", *parts)))


def config_digest(resolved: dict) -> str:
    raw = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


# -- scenario loading ---------------------------------------------------------


def load_scenario(
    path: str | Path,
    *,
    overlays_override: str | None = None,
    supervisor_override: str | None = None,
    fallbacks_override: str | None = None,
) -> Scenario:
    path = Path(path)
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError("<scenario>", "scenario must be a JSON object")
    scenario_id = doc.get("id")
    if not isinstance(scenario_id, str) or not scenario_id:
        raise ValidationError("<scenario>", "scenario needs a non-empty 'id'")

    turns_raw = doc.get("user_turns")
    if not isinstance(turns_raw, list) or not turns_raw:
        raise ValidationError(scenario_id, "scenario needs a non-empty 'user_turns' list")
    user_turns: list[tuple[str, frozenset[str]]] = []
    for idx, turn in enumerate(turns_raw):
        if not isinstance(turn, dict) or not isinstance(turn.get("text"), str):
            raise ValidationError(scenario_id, f"user_turns[{idx}] needs a 'text' string")
        tags = turn.get("tags", [])
        if not isinstance(tags, list) or any(not isinstance(t, str) for t in tags):
            raise ValidationError(scenario_id, f"user_turns[{idx}] tags must be strings")
        user_turns.append((turn["text"], frozenset(tags)))

    resolved = resolve_config_dict(
        doc.get("engine") or {},
        path.parent,
        overlays_override=overlays_override,
        supervisor_override=supervisor_override,
        fallbacks_override=fallbacks_override,
    )
    config = config_from_resolved(resolved)

    policy = _build_policy(doc.get("policy"), scenario_id, path.parent)

    rollout_policy = None
    if resolved.get("rollout_policy") is not None:
        rollout_policy = parse_rollout_policy(resolved["rollout_policy"])

    expected = doc.get("expected_digest")
    if expected is not None and not isinstance(expected, str):
        raise ValidationError(scenario_id, "'expected_digest' must be a string")

    return Scenario(
        id=scenario_id,
        user_turns=tuple(user_turns),
        policy=policy,
        rollout_policy=rollout_policy,
        config=config,
        resolved_config=resolved,
        expected_digest=expected,
    )


def _build_policy(raw: object, scenario_id: str, base_dir: Path) -> object:
    if not isinstance(raw, dict):
        raise ValidationError(scenario_id, "scenario needs a 'policy' object")
    kind = raw.get("type", "scripted")
    if kind == "scripted":
        return parse_scripted_policy(raw)
    if kind == "remote_fixture":
        fixture = raw.get("fixture")
        if not isinstance(fixture, str):
            raise ValidationError(scenario_id, "remote_fixture policy needs 'fixture' path")
        return RemoteEndpoint(
            url=str(raw.get("url", "https://example.invalid/v1/chat/completions")),
            model=str(raw.get("model", "fixture-model")),
            transport=fixture_transport(str((base_dir / fixture).resolve())),
        )
    raise ValidationError(scenario_id, f"unknown policy type {kind!r}")


# -- running -------------------------------------------------------------------


def run_scenario(scenario: Scenario) -> TrajectoryLog:
    """Execute a scenario and emit its trajectory log.

    Online invariant checks (enforcement soundness, bounded work) raise
    ``InvariantViolation`` mid-run rather than producing a bad log.
    """
    engine = Engine(scenario.config, scenario.policy, scenario.rollout_policy)
    state = initial_state(scenario.id, engine.initial_mode())
    pending = None
    records: list[dict] = []
    regen_bound = scenario.config.limits.regen_bound

    for ordinal, (text, tags) in enumerate(scenario.user_turns):
        state, result, pending = engine.run_turn(state, ordinal, text, tags, pending)
        _check_turn_invariants(result, regen_bound)
        records.append(_turn_record(result))

    header = {
        "type": "header",
        "engine_version": __version__,
        "scenario_id": scenario.id,
        "session_id": scenario.id,
        "config_digest": config_digest(scenario.resolved_config),
        "config": scenario.resolved_config,
    }
    summary = {
        "type": "summary",
        "metrics": metrics_from_records(records),
        "final_digest": records[-1]["state_digest"] if records else state_digest(state),
    }
    log = TrajectoryLog(header, records, summary)

    if scenario.expected_digest is not None:
        actual = log_digest(log)
        if actual != scenario.expected_digest:
            raise InvariantViolation(
                f"golden log digest mismatch: expected {scenario.expected_digest}, "
                f"got {actual}"
            )
    return log


def _check_turn_invariants(result: TurnResult, regen_bound: int) -> None:
    if result.policy_calls > regen_bound + 1:
        raise InvariantViolation(
            f"bounded-work violation: {result.policy_calls} policy calls "
            f"with regen_bound={regen_bound}",
            result.ordinal,
        )
    decision = result.decision
    if decision is None:
        if result.policy_calls != 0:
            raise InvariantViolation("gated turn performed policy calls", result.ordinal)
        return
    if decision.disposition.kind is DispositionKind.EXECUTE:
        final = decision.attempt_log[-1].admissible_set
        judged = final.candidates[decision.disposition.execute_index]
        if not judged.admissible:
            raise InvariantViolation(
                "enforcement soundness violation: executed candidate has an "
                "inadmissible verdict",
                result.ordinal,
            )


# -- record serialization -----------------------------------------------------


def _verdict_dict(v) -> dict:
    return {
        "overlay_id": v.overlay_id,
        "activated": v.activated,
        "deviation": v.deviation,
        "admissible": v.admissible,
        "descriptor": v.descriptor,
        "effective_epsilon": v.effective_epsilon,
        "confidence": v.confidence,
    }


def _feedback_dict(fb) -> dict | None:
    if fb is None:
        return None
    return {
        "strength": fb.strength.value,
        "violated": [list(item) for item in fb.violated_overlays],
        "text": fb.directive_text,
    }


def _action_dict(action: CandidateAction | None) -> dict | None:
    if action is None:
        return None
    return {
        "content": action.content,
        "kind": action.kind.value,
        "source": action.source.value,
        "generation_attempt": action.generation_attempt,
        "mode_target": action.mode_target,
        "fallback_id": action.fallback_id,
    }


def _lookahead_dict(la) -> dict | None:
    if la is None:
        return None
    witness = None
    if la.witness is not None:
        witness = {
            "rollout": la.witness.rollout,
            "steps": [
                {
                    "user_text": s.user_text,
                    "replies": list(s.reply_texts),
                    "any_admissible": s.any_admissible,
                }
                for s in la.witness.steps
            ],
        }
    return {
        "passed": la.passed,
        "unsafe_fraction": la.unsafe_fraction,
        "degraded": la.degraded,
        "witness": witness,
    }


def _turn_record(result: TurnResult) -> dict:
    decision = result.decision
    attempts = []
    if decision is not None:
        for rec in decision.attempt_log:
            attempts.append(
                {
                    "attempt": rec.attempt,
                    "rejection_reason": rec.rejection_reason.value
                    if rec.rejection_reason
                    else None,
                    "feedback": _feedback_dict(rec.feedback_issued),
                    "lookahead": _lookahead_dict(rec.lookahead),
                    "admissible_indices": list(rec.admissible_set.admissible_indices),
                    "candidates": [
                        {
                            "content": j.candidate.content,
                            "kind": j.candidate.kind.value,
                            "source": j.candidate.source.value,
                            "generation_attempt": j.candidate.generation_attempt,
                            "confidence": j.confidence,
                            "admissible": j.admissible,
                            "verdicts": [_verdict_dict(v) for v in j.verdicts],
                        }
                        for j in rec.admissible_set.candidates
                    ],
                }
            )
    return {
        "type": "turn",
        "ordinal": result.ordinal,
        "user_text": result.user_text,
        "tags": sorted(result.tags),
        "gate": {"engage": result.gate.engage, "reason": result.gate.reason},
        "mode": result.mode,
        "policy_profile": result.policy_profile,
        "mode_switch": None
        if result.mode_switch is None
        else {
            "target": result.mode_switch.target,
            "admissible": result.mode_switch.admissible,
            "verdicts": [_verdict_dict(v) for v in result.mode_switch.verdicts],
        },
        "attempts": attempts,
        "rejection_reason": decision.rejection_reason.value
        if decision is not None and decision.rejection_reason is not None
        else None,
        "disposition": None
        if decision is None
        else {
            "kind": decision.disposition.kind.value,
            "execute_index": decision.disposition.execute_index,
            "fallback_id": decision.disposition.fallback_id,
        },
        "attempts_used": None if decision is None else decision.attempts_used,
        "policy_unavailable": None if decision is None else decision.policy_unavailable,
        "ensemble_disagreement": result.ensemble_disagreement,
        "executed": _action_dict(result.action),
        "feedback_out": _feedback_dict(decision.feedback) if decision is not None else None,
        "policy_calls": result.policy_calls,
        "prev_digest": result.prev_digest,
        "state_digest": result.digest,
    }


# -- metrics -------------------------------------------------------------------


def metrics_from_records(records: Iterable[dict]) -> dict:
    """Pure aggregation over turn records (definitions in the README)."""
    records = list(records)
    turns = len(records)
    engaged = [r for r in records if r.get("disposition") is not None]
    violation_attempts = 0
    regenerations = 0
    fallbacks = 0
    defers = 0
    mode_switches = 0
    policy_calls = 0
    activations: dict[str, int] = {}
    for r in records:
        switch = r.get("mode_switch")
        if switch is not None and switch.get("admissible"):
            mode_switches += 1
        policy_calls += r.get("policy_calls", 0)
        for attempt in r.get("attempts", []):
            for cand in attempt.get("candidates", []):
                if not cand.get("admissible"):
                    violation_attempts += 1
                for v in cand.get("verdicts", []):
                    if v.get("activated"):
                        activations[v["overlay_id"]] = activations.get(v["overlay_id"], 0) + 1
        if r.get("disposition") is not None:
            regenerations += r.get("attempts_used", 0)
            kind = r["disposition"]["kind"]
            if kind == "fallback":
                fallbacks += 1
            elif kind == "defer":
                defers += 1
    engaged_turns = len(engaged)
    return {
        "turns": turns,
        "engaged_turns": engaged_turns,
        "gated_turns": turns - engaged_turns,
        "policy_calls": policy_calls,
        "violation_attempts": violation_attempts,
        "regenerations": regenerations,
        "regen_rate": regenerations / engaged_turns if engaged_turns else 0.0,
        "fallbacks": fallbacks,
        "fallback_rate": fallbacks / engaged_turns if engaged_turns else 0.0,
        "defers": defers,
        "mode_switches": mode_switches,
        "per_overlay_activations": dict(sorted(activations.items())),
    }


def metrics(log: TrajectoryLog) -> dict:
    return metrics_from_records(log.records)


# -- replay audit --------------------------------------------------------------


def replay(log: TrajectoryLog) -> dict:
    """Reconstruct the trajectory from the log and re-verify it.

    Checks, per turn: digest chain linkage, state reconstruction via
    ``apply_transition``, enforcement soundness of executed decisions
    (independent re-evaluation of the active overlay pack), and verbatim
    fallback content. Raises ``InvariantViolation`` naming the first bad
    turn.
    """
    config = config_from_resolved(log.header["config"])
    engine = Engine(config, policy=None)  # policy never sampled during replay
    extractors = builtin_extractors()
    session = log.header.get("session_id", log.header.get("scenario_id", "replay"))

    state = initial_state(session, engine.initial_mode())
    prev = state_digest(state)
    for record in log.records:
        ordinal = record.get("ordinal")
        if record["prev_digest"] != prev:
            raise InvariantViolation(
                f"digest chain break at turn {ordinal}: expected prev "
                f"{prev}, log says {record['prev_digest']}",
                ordinal,
            )
        state = record_user_turn(
            state, record["user_text"], frozenset(record.get("tags", []))
        )

        switch = record.get("mode_switch")
        if switch is not None and switch.get("admissible"):
            action = CandidateAction(
                "",
                kind=ActionKind.MODE_SWITCH,
                source=ActionSource.SUPERVISOR,
                mode_target=switch["target"],
            )
            state = apply_transition(state, action, state.exogenous_tags)

        executed = record.get("executed")
        if executed is not None:
            action = CandidateAction(
                content=executed["content"],
                kind=ActionKind(executed["kind"]),
                generation_attempt=executed.get("generation_attempt", 0),
                source=ActionSource(executed["source"]),
                mode_target=executed.get("mode_target"),
                fallback_id=executed.get("fallback_id"),
            )
            disposition = record["disposition"]["kind"]
            if disposition == "fallback":
                entry = config.fallbacks.entry(record["disposition"]["fallback_id"])
                if entry.action_content != action.content:
                    raise InvariantViolation(
                        f"turn {ordinal}: fallback content differs from library entry",
                        ordinal,
                    )
            features = dict(extract_all(extractors, state, action))
            features[ACTION_CLASS_FEATURE] = label(ACTION_CLASS_FEATURE, action.class_label)
            if disposition == "execute":
                overlays = engine.active_pack(record["mode"])
                verdicts = evaluate_pack(
                    overlays,
                    features,
                    features,
                    permissive_relaxation=config.permissive_relaxation,
                )
                if not all(v.admissible for v in verdicts):
                    raise InvariantViolation(
                        f"turn {ordinal}: executed action fails independent "
                        f"re-evaluation under pack of mode {record['mode']!r}",
                        ordinal,
                    )
            state = state.with_feature_cache(features)
            resets = False
            if disposition == "fallback":
                resets = config.fallbacks.entry(
                    record["disposition"]["fallback_id"]
                ).resets_trajectory
            state = apply_transition(
                state, action, frozenset(record.get("tags", [])), reset_counters=resets
            )

        digest = state_digest(state)
        if digest != record["state_digest"]:
            raise InvariantViolation(
                f"state digest mismatch at turn {ordinal}: replay computed "
                f"{digest}, log says {record['state_digest']}",
                ordinal,
            )
        prev = digest

    recomputed = metrics_from_records(log.records)
    if recomputed != log.summary.get("metrics"):
        raise InvariantViolation("summary metrics do not match recomputation")
    return {"turns_verified": len(log.records), "final_digest": prev}
