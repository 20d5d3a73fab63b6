"""Engine event records, clocks, and canonical JSON helpers.

All workflow state is event-sourced: every state change is described by one
immutable EngineEvent, and replaying an instance's event log rebuilds the
exact same state, byte for byte. To make that possible, events carry their
own timestamps and every identifier they mention, and nothing during replay
consults a clock or an id generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any


class EventType(str, Enum):
    INSTANCE_CREATED = "InstanceCreated"
    TASK_STARTED = "TaskStarted"
    TASK_COMPLETED = "TaskCompleted"
    TASK_SKIPPED = "TaskSkipped"
    AWAITING_EXTERNAL = "AwaitingExternal"
    EXTERNAL_RECEIVED = "ExternalReceived"
    DECISION_RAISED = "DecisionRaised"
    DECISION_RESOLVED = "DecisionResolved"
    PHASE_ENTERED = "PhaseEntered"
    PHASE_COMPLETED = "PhaseCompleted"
    LOOP_BACK = "LoopBack"
    COMMAND_REJECTED = "CommandRejected"


@dataclass(frozen=True)
class EngineEvent:
    """One immutable entry in an instance's gap-free, per-instance log."""

    seq: int
    instance_id: str
    type: EventType
    payload: dict[str, Any]
    at: str  # ISO-8601 UTC, fixed width (microsecond precision)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "instance_id": self.instance_id,
            "type": self.type.value,
            "payload": self.payload,
            "at": self.at,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EngineEvent":
        return cls(
            seq=int(data["seq"]),
            instance_id=data["instance_id"],
            type=EventType(data["type"]),
            payload=data["payload"],
            at=data["at"],
        )


def canonical_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, no whitespace, exact text."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def format_ts(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat(timespec="microseconds")


def parse_ts(value: str) -> datetime:
    return datetime.fromisoformat(value)


class UtcClock:
    """Wall-clock timestamps, clamped to be monotone non-decreasing."""

    def __init__(self) -> None:
        self._last = datetime.min.replace(tzinfo=timezone.utc)

    def now(self) -> str:
        current = datetime.now(timezone.utc)
        if current <= self._last:
            current = self._last + timedelta(microseconds=1)
        self._last = current
        return format_ts(current)


class LogicalClock:
    """Manually advanced clock for deterministic runs and simulations."""

    def __init__(self, start: datetime | str | None = None) -> None:
        if start is None:
            start = datetime(2020, 1, 1, tzinfo=timezone.utc)
        elif isinstance(start, str):
            start = parse_ts(start)
        self._current = start

    def now(self) -> str:
        return format_ts(self._current)

    def advance(self, seconds: float) -> str:
        self._current += timedelta(seconds=seconds)
        return self.now()

    def at_offset(self, seconds: float) -> str:
        return format_ts(self._current + timedelta(seconds=seconds))
