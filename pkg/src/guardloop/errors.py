"""Exception types shared across the engine.

Rejections are values, not exceptions: the observer returns rejection
reasons inside decisions. Exceptions here mark configuration defects,
adapter failures, and contract violations that must stop a run.
"""
from __future__ import annotations


class GuardloopError(Exception):
    """Base class for all engine errors."""


class ParseError(GuardloopError):
    """A config document is not syntactically valid.

    Carries a 1-based line number for authoring feedback.
    """

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class ValidationError(GuardloopError):
    """A config document parsed but violates the schema or registry.

    ``position`` is the item's id when known, else its index in the
    document.
    """

    def __init__(self, position: str, message: str) -> None:
        super().__init__(f"{position}: {message}")
        self.position = position
        self.message = message


class ExtractorFault(GuardloopError):
    """A feature extractor violated its contract (e.g. emitted an
    undeclared feature or a malformed value)."""

    def __init__(self, name: str, message: str) -> None:
        super().__init__(f"extractor {name!r}: {message}")
        self.name = name


class BasePolicyUnavailable(GuardloopError):
    """The base policy could not produce candidates (timeout, auth,
    malformed response). The observer falls back immediately."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class RolloutPolicyUnavailable(GuardloopError):
    """The lookahead rollout adapter is absent or failed; lookahead
    degrades to advisory pass-through."""


class FallbackLibraryInvalid(GuardloopError):
    """The fallback library fails its totality contract. Raised at
    startup, never at runtime."""


class InvariantViolation(GuardloopError):
    """A runtime invariant check failed mid-run (replay mismatch,
    enforcement soundness breach, digest chain break)."""

    def __init__(self, message: str, turn_index: int | None = None) -> None:
        super().__init__(message)
        self.turn_index = turn_index
