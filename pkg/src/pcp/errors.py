"""Error taxonomy shared by the engine, router, store, and HTTP service.

Every domain failure carries a stable machine-readable code so the service
layer can map it to an HTTP status without string matching.
"""

from __future__ import annotations

# Codes that mean "the addressed thing does not exist" (HTTP 404).
NOT_FOUND_CODES = frozenset(
    {
        "unknown-version",
        "unknown-instance",
        "unknown-phase",
        "unknown-task",
        "unknown-execution",
        "unknown-decision",
        "unknown-token",
        "unknown-stakeholder",
        "unknown-entity",
    }
)

# Codes that mean "the command conflicts with current state" (HTTP 409).
CONFLICT_CODES = frozenset(
    {
        "precedence-violation",
        "phase-order-violation",
        "wrong-state",
        "already-decided",
        "invalid-choice",
        "mandatory-task-incomplete",
        "empty-iteration",
        "awaiting-external",
        "pending-decisions",
        "never-executed",
        "consult-not-allowed",
        "token-expired",
        "duplicate-response",
        "duplicate-version",
        "duplicate-stakeholder",
    }
)

# Codes that mean "the input itself is unusable" (HTTP 422).
INVALID_CODES = frozenset({"invalid-model", "invalid-document", "malformed"})


class PcpError(Exception):
    """Domain error with a stable code and human-readable message."""

    def __init__(self, code: str, message: str, **detail: object) -> None:
        super().__init__(message)
        self.code = code
        self.message = message
        self.detail = dict(detail)

    def to_dict(self) -> dict:
        return {"error": self.code, "message": self.message, "detail": self.detail}


def http_status(code: str) -> int:
    if code in NOT_FOUND_CODES:
        return 404
    if code in CONFLICT_CODES:
        return 409
    if code in INVALID_CODES:
        return 422
    return 500
