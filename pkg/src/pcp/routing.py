"""External connector: router-style token exchange with stakeholders.

The connector holds the addresses of departments, consultees, and citizen
channels; tasks that need outside input dispatch correlated request tokens
through it and block (AwaitingExternal) until the matching response arrives
or the token expires. Responses correlate by token_id only, never by arrival
order, and each token accepts at most one response.

A deterministic network simulation stands in for real stakeholders at desk
scale: given a seed it reproduces the exact same delivery schedule, drops,
and therefore event logs. Drop decisions consume one uniform draw per
dispatched token, in dispatch order, from ``random.Random(f"{seed}:drop")``
so a test can replay them independently; latency draws come from a separate
``f"{seed}:latency"`` stream and never disturb the drop sequence.
"""

from __future__ import annotations

import heapq
import random
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .engine import Engine, DecisionPoint, PolicyInstance, Token
from .errors import PcpError


class StakeholderKind(str, Enum):
    DEPARTMENT = "Department"
    CONSULTEE = "Consultee"
    CITIZEN_CHANNEL = "CitizenChannel"


@dataclass(frozen=True)
class StakeholderAddress:
    id: str
    name: str
    department: str
    endpoint: str
    kind: StakeholderKind = StakeholderKind.DEPARTMENT

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "department": self.department,
            "endpoint": self.endpoint,
            "kind": self.kind.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StakeholderAddress":
        return cls(
            id=data["id"],
            name=data.get("name", data["id"]),
            department=data.get("department", ""),
            endpoint=data["endpoint"],
            kind=StakeholderKind(data.get("kind", "Department")),
        )


def response_envelope(
    token_id: str, responder: str, payload: dict[str, Any], responded_at: str | None = None
) -> dict[str, Any]:
    return {
        "token_id": token_id,
        "responder": responder,
        "payload": payload,
        "responded_at": responded_at,
    }


class ExternalConnector:
    """One shared router holding stakeholder addresses and outstanding tokens.

    Rejected responses (unknown token, duplicate, expired) are kept in an
    audit list; they change no instance state and produce no provenance.
    """

    def __init__(self, engine: Engine) -> None:
        self.engine = engine
        self._stakeholders: dict[str, StakeholderAddress] = {}
        self._endpoints: dict[str, str] = {}
        self._lock = threading.RLock()
        self.rejected_responses: list[dict[str, Any]] = []

    def register_stakeholder(self, addr: StakeholderAddress) -> StakeholderAddress:
        with self._lock:
            if addr.id in self._stakeholders:
                raise PcpError(
                    "duplicate-stakeholder", f"stakeholder id {addr.id!r} already registered"
                )
            if addr.endpoint in self._endpoints:
                raise PcpError(
                    "duplicate-stakeholder",
                    f"endpoint {addr.endpoint!r} already registered to {self._endpoints[addr.endpoint]!r}",
                )
            self._stakeholders[addr.id] = addr
            self._endpoints[addr.endpoint] = addr.id
            return addr

    def stakeholder(self, stakeholder_id: str) -> StakeholderAddress:
        with self._lock:
            try:
                return self._stakeholders[stakeholder_id]
            except KeyError:
                raise PcpError(
                    "unknown-stakeholder", f"no stakeholder {stakeholder_id!r}"
                ) from None

    def stakeholders(self) -> list[StakeholderAddress]:
        with self._lock:
            return [self._stakeholders[k] for k in sorted(self._stakeholders)]

    def dispatch_token(
        self,
        instance_id: str,
        task_exec_id: str,
        destination: str,
        text: str,
        expected_kind: str,
        deadline: str,
    ) -> Token:
        with self._lock:
            known = destination in self._stakeholders
        if not known:
            err = PcpError("unknown-stakeholder", f"no stakeholder {destination!r}")
            self.engine.reject_command(
                instance_id,
                "dispatch_token",
                err,
                {"task_exec_id": task_exec_id, "destination": destination},
            )
            raise err
        return self.engine.dispatch_token(
            instance_id,
            task_exec_id,
            destination,
            {"text": text, "expected_kind": expected_kind},
            deadline,
        )

    def receive_response(
        self, token_id: str, payload: dict[str, Any], responder: str
    ) -> PolicyInstance:
        try:
            return self.engine.receive_response(token_id, payload, responder)
        except PcpError as err:
            self.rejected_responses.append(
                {
                    "token_id": token_id,
                    "responder": responder,
                    "code": err.code,
                    "at": self.engine.clock.now(),
                }
            )
            raise

    def receive_envelope(self, envelope: dict[str, Any]) -> PolicyInstance:
        for key in ("token_id", "responder", "payload"):
            if key not in envelope:
                raise PcpError("malformed", f"response envelope missing {key!r}")
        return self.receive_response(
            envelope["token_id"], envelope["payload"], envelope["responder"]
        )

    def expire_tokens(self, now: str | None = None) -> list[DecisionPoint]:
        return self.engine.expire_tokens(now)

    def outstanding(self, instance_id: str | None = None) -> list[Token]:
        ids = [instance_id] if instance_id else self.engine.instance_ids()
        tokens: list[Token] = []
        for iid in ids:
            tokens.extend(self.engine.instance(iid).outstanding_tokens())
        return tokens


Responder = Callable[[dict[str, Any]], dict[str, Any]]


def _default_responder(envelope: dict[str, Any]) -> dict[str, Any]:
    details = envelope["requested_details"]
    return {
        "kind": details.get("expected_kind", "document"),
        "content": f"reply from {envelope['destination']} to {details.get('text', '')}",
    }


@dataclass
class SimulationStats:
    dispatched: int = 0
    dropped: int = 0
    delivered: int = 0
    rejected_late: int = 0
    drop_draws: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dispatched": self.dispatched,
            "dropped": self.dropped,
            "delivered": self.delivered,
            "rejected_late": self.rejected_late,
        }


class NetworkSimulation:
    """Lossy, latency-bound delivery of tokens to scripted stakeholders.

    The engine must run on the LogicalClock passed here; simulated time is
    seconds since that clock's start. Deliveries happen in due-time order
    (ties broken by submission order), each advancing the shared clock, so
    two runs with the same seed and script produce identical event logs.
    """

    def __init__(
        self,
        connector: ExternalConnector,
        clock: Any,
        drop_probability: float = 0.0,
        latency: tuple[float, float] = (0.0, 0.0),
        seed: int = 0,
        responders: dict[str, Responder] | None = None,
    ) -> None:
        if not 0.0 <= drop_probability <= 1.0:
            raise ValueError(f"drop probability must be in [0, 1], got {drop_probability}")
        if latency[0] > latency[1] or latency[0] < 0:
            raise ValueError(f"latency bounds must satisfy 0 <= lo <= hi, got {latency}")
        self.connector = connector
        self.clock = clock
        self.drop_probability = drop_probability
        self.latency = latency
        self.responders = responders or {}
        self._drop_rng = random.Random(f"{seed}:drop")
        self._latency_rng = random.Random(f"{seed}:latency")
        self._queue: list[tuple[float, int, dict[str, Any]]] = []
        self._submitted = 0
        self.now_s = 0.0
        self.stats = SimulationStats()

    def dispatch(
        self,
        instance_id: str,
        task_exec_id: str,
        destination: str,
        text: str,
        expected_kind: str = "document",
        deadline_s: float = 60.0,
    ) -> Token:
        token = self.connector.dispatch_token(
            instance_id,
            task_exec_id,
            destination,
            text,
            expected_kind,
            deadline=self.clock.at_offset(deadline_s),
        )
        self.submit(token)
        return token

    def submit(self, token: Token) -> None:
        """Route a dispatched token through the simulated network."""
        self.stats.dispatched += 1
        draw = self._drop_rng.random()
        self.stats.drop_draws.append(draw)
        if draw < self.drop_probability:
            self.stats.dropped += 1
            return
        delay = self._latency_rng.uniform(*self.latency)
        self._submitted += 1
        heapq.heappush(self._queue, (self.now_s + delay, self._submitted, token.envelope()))

    def run_until(self, until_s: float) -> None:
        """Deliver everything due up to (and including) until_s, advancing time."""
        while self._queue and self._queue[0][0] <= until_s:
            due, _, envelope = heapq.heappop(self._queue)
            self._advance_to(due)
            responder = self.responders.get(envelope["destination"], _default_responder)
            payload = responder(envelope)
            try:
                self.connector.receive_response(
                    envelope["token_id"], payload, responder=envelope["destination"]
                )
                self.stats.delivered += 1
            except PcpError:
                self.stats.rejected_late += 1
        self._advance_to(until_s)

    def _advance_to(self, t: float) -> None:
        if t > self.now_s:
            self.clock.advance(t - self.now_s)
            self.now_s = t

    def pending_deliveries(self) -> int:
        return len(self._queue)


def replay_drop_decisions(seed: int, drop_probability: float, count: int) -> list[bool]:
    """Recompute the simulation's drop sequence without the simulation."""
    rng = random.Random(f"{seed}:drop")
    return [rng.random() < drop_probability for _ in range(count)]
