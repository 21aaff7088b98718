"""guardloop: runtime supervisory control for conversational policies.

An unconstrained base policy proposes candidate actions; a runtime
observer judges them against externally specified overlay constraints
and only admissible actions execute. Inadmissible proposals trigger
bounded regeneration with constraint-aware feedback, then safe
fallbacks. A hierarchical supervisor gates engagement and switches
activity modes, lookahead rejects locally fine but trajectory-unsafe
candidates, and observer ensembles arbitrate heterogeneous constraint
families.
"""

__version__ = "0.1.0"

from .state import (
    ActionKind,
    ActionSource,
    CandidateAction,
    InteractionState,
    Speaker,
    Transition,
    Turn,
    apply_transition,
    initial_state,
    record_user_turn,
    state_digest,
)
from .features import (
    FeatureExtractor,
    FeatureScope,
    FeatureValue,
    builtin_extractors,
    builtin_feature_names,
    extract_all,
)
from .overlays import (
    AdaptiveRigidity,
    Overlay,
    OverlayKind,
    OverlayVerdict,
    RigidityPolicy,
    evaluate,
    evaluate_pack,
    parse_overlay_set,
    serialize_overlay_set,
)
from .observer import (
    AdmissibleSet,
    FallbackEntry,
    FallbackLibrary,
    FeedbackDirective,
    FeedbackStrength,
    ObserverDecision,
    ObserverLimits,
    RejectionReason,
    decide,
    judge,
    parse_fallback_library,
    select_fallback,
)
from .supervisor import (
    GateDecision,
    Mode,
    SupervisorConfig,
    gate,
    parse_supervisor_config,
    select_mode,
)
from .lookahead import LookaheadConfig, LookaheadResult, check
from .ensemble import (
    ArbitrationRule,
    OverlayUpdate,
    apply_overlay_update,
    arbitrate,
)
from .adapters import (
    RemoteEndpoint,
    ScriptedPolicy,
    ScriptedRolloutPolicy,
    scripted_sample,
    remote_chat_sample,
)
from .engine import Engine, EngineConfig
from .harness import (
    Scenario,
    TrajectoryLog,
    load_scenario,
    log_digest,
    metrics,
    replay,
    run_scenario,
)
from .errors import (
    BasePolicyUnavailable,
    ExtractorFault,
    FallbackLibraryInvalid,
    GuardloopError,
    InvariantViolation,
    ParseError,
    RolloutPolicyUnavailable,
    ValidationError,
)
