"""Event-sourced workflow engine for multi-phase policy instances.

Commands validate against current state, then emit EngineEvents; state is
mutated exclusively by applying events (``apply_event``), so replaying an
instance's log on a fresh engine reproduces a byte-identical snapshot.

Per instance, commands are applied strictly serially (one lock per
instance); distinct instances progress independently. A rejected command
emits exactly one CommandRejected event, changes no state, and raises a
PcpError carrying the machine-readable code.

Phase connectors hold the last terminal activity of the running iteration
and act as decision points: inter-phase transitions and loop-backs raise
explicit DecisionPoints that humans resolve (a single-option phase entry may
auto-resolve under a synthetic system agent when the target phase's model
says no entry decision is required).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from .errors import PcpError
from .events import EngineEvent, EventType, UtcClock, canonical_json, parse_ts
from .model import MetaMetaModel, MetaModelRegistry, PhaseMetaModel

SYSTEM_AGENT = "system"

CONNECTOR_ROLE = "decision making node joining phases"


class InstanceStatus(str, Enum):
    ACTIVE = "Active"
    COMPLETED = "Completed"
    ABANDONED = "Abandoned"


class PhaseState(str, Enum):
    ACTIVE = "Active"
    COMPLETED = "Completed"


class EnteredVia(str, Enum):
    INITIAL = "Initial"
    TRANSITION = "Transition"
    LOOP_BACK = "LoopBack"


class TaskState(str, Enum):
    READY = "Ready"
    IN_PROGRESS = "InProgress"
    AWAITING_EXTERNAL = "AwaitingExternal"
    COMPLETED = "Completed"
    SKIPPED = "Skipped"


TERMINAL_TASK_STATES = (TaskState.COMPLETED, TaskState.SKIPPED)


class DecisionKind(str, Enum):
    NEXT_TASK = "NextTask"
    PHASE_ENTRY = "PhaseEntry"
    LOOP_BACK_TARGET = "LoopBackTarget"
    TOKEN_EXPIRY = "TokenExpiry"
    SKIP_APPROVAL = "SkipApproval"


class TokenState(str, Enum):
    DISPATCHED = "Dispatched"
    RESPONDED = "Responded"
    EXPIRED = "Expired"


SKIP_OPTIONS = ["approve", "reject"]
EXPIRY_OPTIONS = ["Redispatch", "SkipConsultation", "AbandonTask"]


@dataclass
class PhaseExecution:
    phase_id: str
    iteration: int
    state: PhaseState
    entered_via: EnteredVia
    entered_at: str
    completed_at: str | None = None
    entry_task_id: str | None = None
    triggering_activity: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "phase_id": self.phase_id,
            "iteration": self.iteration,
            "state": self.state.value,
            "entered_via": self.entered_via.value,
            "entered_at": self.entered_at,
            "completed_at": self.completed_at,
            "entry_task_id": self.entry_task_id,
            "triggering_activity": self.triggering_activity,
        }


@dataclass
class TaskExecution:
    exec_id: str
    task_id: str
    phase_id: str
    iteration: int
    state: TaskState
    actor: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)
    started_at: str | None = None
    ended_at: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "exec_id": self.exec_id,
            "task_id": self.task_id,
            "phase_id": self.phase_id,
            "iteration": self.iteration,
            "state": self.state.value,
            "actor": self.actor,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "comments": list(self.comments),
            "started_at": self.started_at,
            "ended_at": self.ended_at,
        }


@dataclass
class Connector:
    """Per-phase decision node holding the phase's last terminal activity."""

    phase_id: str
    last_activity: dict[str, Any] | None = None
    role: str = CONNECTOR_ROLE

    def to_dict(self) -> dict[str, Any]:
        return {
            "phase_id": self.phase_id,
            "last_activity": self.last_activity,
            "role": self.role,
        }


@dataclass
class DecisionPoint:
    id: str
    instance_id: str
    kind: DecisionKind
    options: list[str]
    context: dict[str, Any]
    raised_at: str
    chosen: str | None = None
    decided_by: str | None = None
    decided_at: str | None = None

    @property
    def pending(self) -> bool:
        return self.decided_at is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "instance_id": self.instance_id,
            "kind": self.kind.value,
            "options": list(self.options),
            "context": self.context,
            "raised_at": self.raised_at,
            "chosen": self.chosen,
            "decided_by": self.decided_by,
            "decided_at": self.decided_at,
        }


@dataclass
class Token:
    token_id: str
    instance_id: str
    task_exec_id: str
    destination: str
    requested_details: dict[str, Any]
    issued_at: str
    deadline: str
    state: TokenState
    redispatch_of: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "token_id": self.token_id,
            "instance_id": self.instance_id,
            "task_exec_id": self.task_exec_id,
            "destination": self.destination,
            "requested_details": self.requested_details,
            "issued_at": self.issued_at,
            "deadline": self.deadline,
            "state": self.state.value,
            "redispatch_of": self.redispatch_of,
        }

    def envelope(self) -> dict[str, Any]:
        """Wire form of the request sent to the stakeholder."""
        return {
            "token_id": self.token_id,
            "instance_id": self.instance_id,
            "task_exec_id": self.task_exec_id,
            "destination": self.destination,
            "requested_details": self.requested_details,
            "issued_at": self.issued_at,
            "deadline": self.deadline,
        }


@dataclass
class PolicyInstance:
    id: str
    model_version: str
    status: InstanceStatus
    created_by: str
    created_at: str
    phase_executions: list[PhaseExecution] = field(default_factory=list)
    task_executions: dict[str, TaskExecution] = field(default_factory=dict)
    connectors: dict[str, Connector] = field(default_factory=dict)
    decisions: dict[str, DecisionPoint] = field(default_factory=dict)
    tokens: dict[str, Token] = field(default_factory=dict)
    counters: dict[str, int] = field(
        default_factory=lambda: {"exec": 0, "decision": 0, "token": 0}
    )
    last_seq: int = 0

    def active_phase_execution(self) -> PhaseExecution | None:
        for pe in self.phase_executions:
            if pe.state == PhaseState.ACTIVE:
                return pe
        return None

    def iteration_executions(self, phase_id: str, iteration: int) -> list[TaskExecution]:
        return [
            te
            for te in self.task_executions.values()
            if te.phase_id == phase_id and te.iteration == iteration
        ]

    def latest_iteration(self, phase_id: str) -> int:
        iterations = [pe.iteration for pe in self.phase_executions if pe.phase_id == phase_id]
        return max(iterations, default=0)

    def pending_decisions(self) -> list[DecisionPoint]:
        pending = [d for d in self.decisions.values() if d.pending]
        pending.sort(key=lambda d: (d.raised_at, d.id))
        return pending

    def outstanding_tokens(self) -> list[Token]:
        out = [t for t in self.tokens.values() if t.state == TokenState.DISPATCHED]
        out.sort(key=lambda t: t.token_id)
        return out

    # State view methods used by the condition language.
    def task_completed(self, task_id: str) -> bool:
        return any(
            te.task_id == task_id and te.state == TaskState.COMPLETED
            for te in self.task_executions.values()
        )

    def phase_completed(self, phase_id: str) -> bool:
        return any(
            pe.phase_id == phase_id and pe.state == PhaseState.COMPLETED
            for pe in self.phase_executions
        )

    def responded(self, party_id: str) -> bool:
        return any(
            t.destination == party_id and t.state == TokenState.RESPONDED
            for t in self.tokens.values()
        )

    def snapshot(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "model_version": self.model_version,
            "status": self.status.value,
            "created_by": self.created_by,
            "created_at": self.created_at,
            "last_seq": self.last_seq,
            "counters": dict(self.counters),
            "phase_executions": [pe.to_dict() for pe in self.phase_executions],
            "task_executions": {k: v.to_dict() for k, v in self.task_executions.items()},
            "connectors": {k: v.to_dict() for k, v in self.connectors.items()},
            "decisions": {k: v.to_dict() for k, v in self.decisions.items()},
            "tokens": {k: v.to_dict() for k, v in self.tokens.items()},
        }

    def canonical_json(self) -> str:
        return canonical_json(self.snapshot())


def apply_event(instance: PolicyInstance | None, event: EngineEvent) -> PolicyInstance:
    """Apply one event; the only place instance state ever changes.

    Pure with respect to clocks and id generation: every timestamp is the
    event's own, every identifier comes from the payload.
    """
    p = event.payload
    etype = event.type

    if etype == EventType.INSTANCE_CREATED:
        instance = PolicyInstance(
            id=p["instance_id"],
            model_version=p["model_version"],
            status=InstanceStatus.ACTIVE,
            created_by=p["created_by"],
            created_at=event.at,
            connectors={pid: Connector(pid) for pid in p["phase_ids"]},
        )
        instance.last_seq = event.seq
        return instance

    if instance is None:
        raise ValueError("event log must begin with InstanceCreated")

    if etype == EventType.TASK_STARTED:
        te = TaskExecution(
            exec_id=p["exec_id"],
            task_id=p["task_id"],
            phase_id=p["phase_id"],
            iteration=p["iteration"],
            state=TaskState.IN_PROGRESS,
            actor=p["actor"],
            started_at=event.at,
        )
        instance.task_executions[te.exec_id] = te
        instance.counters["exec"] += 1

    elif etype == EventType.TASK_COMPLETED:
        te = instance.task_executions[p["exec_id"]]
        te.state = TaskState.COMPLETED
        te.ended_at = event.at
        te.outputs = list(p["outputs"])
        te.actor = p["actor"]
        if p.get("comment"):
            te.comments.append(p["comment"])
        _touch_connector(instance, te, p["summary"], event.at)

    elif etype == EventType.TASK_SKIPPED:
        if p["created"]:
            te = TaskExecution(
                exec_id=p["exec_id"],
                task_id=p["task_id"],
                phase_id=p["phase_id"],
                iteration=p["iteration"],
                state=TaskState.SKIPPED,
                actor=p["actor"],
                started_at=event.at,
                ended_at=event.at,
            )
            instance.task_executions[te.exec_id] = te
            instance.counters["exec"] += 1
        else:
            te = instance.task_executions[p["exec_id"]]
            te.state = TaskState.SKIPPED
            te.ended_at = event.at
        te.comments.append(p["reason"])
        _touch_connector(instance, te, p["summary"], event.at)

    elif etype == EventType.AWAITING_EXTERNAL:
        t = p["token"]
        token = Token(
            token_id=t["token_id"],
            instance_id=instance.id,
            task_exec_id=t["task_exec_id"],
            destination=t["destination"],
            requested_details=t["requested_details"],
            issued_at=event.at,
            deadline=t["deadline"],
            state=TokenState.DISPATCHED,
            redispatch_of=t.get("redispatch_of"),
        )
        instance.tokens[token.token_id] = token
        instance.task_executions[token.task_exec_id].state = TaskState.AWAITING_EXTERNAL
        instance.counters["token"] += 1

    elif etype == EventType.EXTERNAL_RECEIVED:
        token = instance.tokens[p["token_id"]]
        token.state = TokenState.RESPONDED
        te = instance.task_executions[token.task_exec_id]
        te.state = TaskState.IN_PROGRESS
        te.inputs.append(p["entity_id"])

    elif etype == EventType.DECISION_RAISED:
        d = p["decision"]
        decision = DecisionPoint(
            id=d["id"],
            instance_id=instance.id,
            kind=DecisionKind(d["kind"]),
            options=list(d["options"]),
            context=d["context"],
            raised_at=event.at,
        )
        instance.decisions[decision.id] = decision
        instance.counters["decision"] += 1
        if decision.kind == DecisionKind.TOKEN_EXPIRY:
            instance.tokens[decision.context["token_id"]].state = TokenState.EXPIRED

    elif etype == EventType.DECISION_RESOLVED:
        decision = instance.decisions[p["decision_id"]]
        decision.chosen = p["choice"]
        decision.decided_by = p["actor"]
        decision.decided_at = event.at
        effect = p.get("effect") or {}
        if "resume_exec" in effect:
            instance.task_executions[effect["resume_exec"]].state = TaskState.IN_PROGRESS

    elif etype in (EventType.PHASE_ENTERED, EventType.LOOP_BACK):
        pe = PhaseExecution(
            phase_id=p["phase_id"],
            iteration=p["iteration"],
            state=PhaseState.ACTIVE,
            entered_via=EnteredVia(p["entered_via"]),
            entered_at=event.at,
            entry_task_id=p.get("entry_task"),
            triggering_activity=p.get("triggering_activity"),
        )
        instance.phase_executions.append(pe)
        # A fresh iteration starts with a clean connector slate.
        instance.connectors[pe.phase_id].last_activity = None

    elif etype == EventType.PHASE_COMPLETED:
        for pe in instance.phase_executions:
            if (
                pe.phase_id == p["phase_id"]
                and pe.iteration == p["iteration"]
                and pe.state == PhaseState.ACTIVE
            ):
                pe.state = PhaseState.COMPLETED
                pe.completed_at = event.at
        if p.get("instance_completed"):
            instance.status = InstanceStatus.COMPLETED

    elif etype == EventType.COMMAND_REJECTED:
        pass

    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unhandled event type {etype}")

    instance.last_seq = event.seq
    return instance


def _touch_connector(
    instance: PolicyInstance, te: TaskExecution, summary: str, at: str
) -> None:
    # Only the phase's most recent iteration owns the connector.
    if te.iteration != instance.latest_iteration(te.phase_id):
        return
    instance.connectors[te.phase_id].last_activity = {
        "exec_id": te.exec_id,
        "task_id": te.task_id,
        "summary": summary,
        "at": at,
    }


def replay(events: Iterable[EngineEvent]) -> PolicyInstance:
    """Rebuild an instance purely from its ordered event log."""
    instance: PolicyInstance | None = None
    for event in events:
        instance = apply_event(instance, event)
    if instance is None:
        raise ValueError("empty event log")
    return instance


def ready_task_ids(model: MetaMetaModel, instance: PolicyInstance) -> set[str]:
    """Tasks of the active iteration that are unstarted with precedence met.

    A precedence entry is met by a Completed or Skipped execution of that
    task within the same iteration; earlier iterations never count.
    """
    if instance.status != InstanceStatus.ACTIVE:
        return set()
    pe = instance.active_phase_execution()
    if pe is None:
        return set()
    phase = model.phase(pe.phase_id)
    if phase is None:
        return set()
    current = instance.iteration_executions(pe.phase_id, pe.iteration)
    attempted = {te.task_id for te in current}
    terminal = {te.task_id for te in current if te.state in TERMINAL_TASK_STATES}
    return {
        t.id for t in phase.tasks if t.id not in attempted and t.precedence <= terminal
    }


class _InstanceRuntime:
    __slots__ = ("instance", "events", "lock")

    def __init__(self) -> None:
        self.instance: PolicyInstance | None = None
        self.events: list[EngineEvent] = []
        self.lock = threading.RLock()


Observer = Callable[[EngineEvent, PolicyInstance], None]


class Engine:
    """Holds instance runtimes and applies commands serially per instance."""

    def __init__(
        self,
        registry: MetaModelRegistry,
        clock: Any | None = None,
        observers: list[Observer] | None = None,
    ) -> None:
        self.registry = registry
        self.clock = clock or UtcClock()
        self.observers: list[Observer] = list(observers or [])
        self._runtimes: dict[str, _InstanceRuntime] = {}
        self._lock = threading.RLock()
        self._instance_n = 0

    # -- plumbing ---------------------------------------------------------

    def _runtime(self, instance_id: str) -> _InstanceRuntime:
        with self._lock:
            rt = self._runtimes.get(instance_id)
        if rt is None or rt.instance is None:
            raise PcpError("unknown-instance", f"no instance {instance_id!r}")
        return rt

    def _emit(self, rt: _InstanceRuntime, etype: EventType, payload: dict[str, Any]) -> EngineEvent:
        seq = len(rt.events) + 1
        instance_id = payload["instance_id"] if etype == EventType.INSTANCE_CREATED else rt.instance.id
        event = EngineEvent(
            seq=seq,
            instance_id=instance_id,
            type=etype,
            payload=payload,
            at=self.clock.now(),
        )
        rt.instance = apply_event(rt.instance, event)
        rt.events.append(event)
        for observer in self.observers:
            observer(event, rt.instance)
        return event

    def _reject(self, rt: _InstanceRuntime, command: str, err: PcpError, params: dict[str, Any]) -> None:
        self._emit(
            rt,
            EventType.COMMAND_REJECTED,
            {"command": command, "code": err.code, "message": err.message, "params": params},
        )

    def _model(self, instance: PolicyInstance) -> MetaMetaModel:
        return self.registry.get(instance.model_version)

    def instance(self, instance_id: str) -> PolicyInstance:
        return self._runtime(instance_id).instance

    def instance_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._runtimes)

    def events(self, instance_id: str, from_seq: int = 1) -> list[EngineEvent]:
        rt = self._runtime(instance_id)
        with rt.lock:
            return [e for e in rt.events if e.seq >= from_seq]

    def find_decision(self, decision_id: str) -> DecisionPoint:
        with self._lock:
            runtimes = list(self._runtimes.values())
        for rt in runtimes:
            if rt.instance is not None and decision_id in rt.instance.decisions:
                return rt.instance.decisions[decision_id]
        raise PcpError("unknown-decision", f"no decision {decision_id!r}")

    def find_token(self, token_id: str) -> Token:
        with self._lock:
            runtimes = list(self._runtimes.values())
        for rt in runtimes:
            if rt.instance is not None and token_id in rt.instance.tokens:
                return rt.instance.tokens[token_id]
        raise PcpError("unknown-token", f"no token {token_id!r}")

    def load_instance(self, events: list[EngineEvent], notify: bool = True) -> PolicyInstance:
        """Rebuild an instance from a persisted log and adopt it.

        Observers are notified per event so derived stores can heal gaps;
        they must be idempotent (the provenance store deduplicates on
        (instance_id, source_seq), the event-log appender by high-water
        mark).
        """
        if not events:
            raise ValueError("empty event log")
        rt = _InstanceRuntime()
        for event in events:
            rt.instance = apply_event(rt.instance, event)
            rt.events.append(event)
            if notify:
                for observer in self.observers:
                    observer(event, rt.instance)
        with self._lock:
            self._runtimes[rt.instance.id] = rt
            head, _, tail = rt.instance.id.rpartition("-")
            if head == "pi" and tail.isdigit():
                self._instance_n = max(self._instance_n, int(tail))
        return rt.instance

    # -- commands ---------------------------------------------------------

    def create_instance(self, version: str, initiator: str) -> PolicyInstance:
        model = self.registry.get(version)  # unknown-version propagates
        with self._lock:
            self._instance_n += 1
            instance_id = f"pi-{self._instance_n}"
            rt = _InstanceRuntime()
            self._runtimes[instance_id] = rt
        with rt.lock:
            self._emit(
                rt,
                EventType.INSTANCE_CREATED,
                {
                    "instance_id": instance_id,
                    "model_version": version,
                    "created_by": initiator,
                    "phase_ids": [p.id for p in model.phases_by_ordinal()],
                },
            )
            first = model.first_phase()
            self._emit(
                rt,
                EventType.PHASE_ENTERED,
                {
                    "phase_id": first.id,
                    "iteration": 1,
                    "entered_via": EnteredVia.INITIAL.value,
                    "entry_task": None,
                },
            )
            return rt.instance

    def ready_tasks(self, instance_id: str) -> set[str]:
        rt = self._runtime(instance_id)
        with rt.lock:
            return ready_task_ids(self._model(rt.instance), rt.instance)

    def _check_active(self, instance: PolicyInstance) -> None:
        if instance.status != InstanceStatus.ACTIVE:
            raise PcpError("wrong-state", f"instance is {instance.status.value}")

    def _active_phase(self, instance: PolicyInstance) -> PhaseExecution:
        pe = instance.active_phase_execution()
        if pe is None:
            raise PcpError("wrong-state", "no active phase (a phase entry decision is pending)")
        return pe

    def _check_startable(
        self, instance: PolicyInstance, model: MetaMetaModel, pe: PhaseExecution, task_id: str
    ) -> None:
        phase = model.phase(pe.phase_id)
        task = phase.task(task_id)
        if task is None:
            owner = model.find_task(task_id)
            if owner is None:
                raise PcpError("unknown-task", f"no task {task_id!r} in model")
            raise PcpError(
                "wrong-state",
                f"task {task_id!r} belongs to phase {owner[0].id!r}, not the active phase {pe.phase_id!r}",
            )
        current = instance.iteration_executions(pe.phase_id, pe.iteration)
        if any(te.task_id == task_id for te in current):
            raise PcpError(
                "wrong-state", f"task {task_id!r} already attempted in this iteration"
            )
        terminal = {te.task_id for te in current if te.state in TERMINAL_TASK_STATES}
        missing = sorted(task.precedence - terminal)
        if missing:
            raise PcpError(
                "precedence-violation",
                f"task {task_id!r} requires {missing} to be completed or skipped first",
            )

    def start_task(self, instance_id: str, task_id: str, actor: str) -> TaskExecution:
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                self._check_active(inst)
                pe = self._active_phase(inst)
                self._check_startable(inst, self._model(inst), pe, task_id)
            except PcpError as err:
                self._reject(rt, "start_task", err, {"task_id": task_id, "actor": actor})
                raise
            exec_id = f"{inst.id}.t{inst.counters['exec'] + 1}"
            self._emit(
                rt,
                EventType.TASK_STARTED,
                {
                    "exec_id": exec_id,
                    "task_id": task_id,
                    "phase_id": pe.phase_id,
                    "iteration": pe.iteration,
                    "actor": actor,
                },
            )
            return inst.task_executions[exec_id]

    def complete_task(
        self,
        instance_id: str,
        exec_id: str,
        outputs: list[str],
        actor: str,
        comment: str | None = None,
    ) -> PolicyInstance:
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                self._check_active(inst)
                te = inst.task_executions.get(exec_id)
                if te is None:
                    raise PcpError("unknown-execution", f"no execution {exec_id!r}")
                if te.state == TaskState.AWAITING_EXTERNAL:
                    raise PcpError(
                        "wrong-state",
                        f"execution {exec_id!r} awaits an external response and cannot complete until one is received",
                    )
                if te.state != TaskState.IN_PROGRESS:
                    raise PcpError(
                        "wrong-state", f"execution {exec_id!r} is {te.state.value}"
                    )
                pe = self._active_phase(inst)
                if (te.phase_id, te.iteration) != (pe.phase_id, pe.iteration):
                    raise PcpError(
                        "wrong-state",
                        f"execution {exec_id!r} belongs to a closed phase iteration",
                    )
            except PcpError as err:
                self._reject(rt, "complete_task", err, {"exec_id": exec_id, "actor": actor})
                raise
            self._emit(
                rt,
                EventType.TASK_COMPLETED,
                {
                    "exec_id": exec_id,
                    "task_id": te.task_id,
                    "phase_id": te.phase_id,
                    "iteration": te.iteration,
                    "outputs": list(outputs),
                    "actor": actor,
                    "comment": comment,
                    "summary": f"{te.task_id} completed by {actor}",
                },
            )
            return inst

    def skip_task(self, instance_id: str, task_id: str, actor: str, reason: str) -> DecisionPoint:
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                self._check_active(inst)
                pe = self._active_phase(inst)
                self._check_startable(inst, self._model(inst), pe, task_id)
                for d in inst.pending_decisions():
                    if (
                        d.kind == DecisionKind.SKIP_APPROVAL
                        and d.context["task_id"] == task_id
                        and d.context["iteration"] == pe.iteration
                        and d.context["phase_id"] == pe.phase_id
                    ):
                        raise PcpError(
                            "wrong-state", f"skip of {task_id!r} already awaits approval ({d.id})"
                        )
            except PcpError as err:
                self._reject(rt, "skip_task", err, {"task_id": task_id, "actor": actor})
                raise
            decision_id = f"{inst.id}.d{inst.counters['decision'] + 1}"
            self._emit(
                rt,
                EventType.DECISION_RAISED,
                {
                    "decision": {
                        "id": decision_id,
                        "kind": DecisionKind.SKIP_APPROVAL.value,
                        "options": list(SKIP_OPTIONS),
                        "context": {
                            "task_id": task_id,
                            "phase_id": pe.phase_id,
                            "iteration": pe.iteration,
                            "requested_by": actor,
                            "reason": reason,
                        },
                    }
                },
            )
            return inst.decisions[decision_id]

    def _check_no_pending_entry(self, instance: PolicyInstance) -> None:
        for d in instance.pending_decisions():
            if d.kind in (DecisionKind.PHASE_ENTRY, DecisionKind.LOOP_BACK_TARGET):
                raise PcpError(
                    "pending-decisions",
                    f"a {d.kind.value} decision ({d.id}) is already pending",
                )

    def _check_phase_closable(
        self, instance: PolicyInstance, model: MetaMetaModel, pe: PhaseExecution
    ) -> None:
        current = instance.iteration_executions(pe.phase_id, pe.iteration)
        awaiting = sorted(te.exec_id for te in current if te.state == TaskState.AWAITING_EXTERNAL)
        if awaiting:
            raise PcpError(
                "awaiting-external",
                f"executions {awaiting} await external responses",
            )
        for d in instance.pending_decisions():
            if (
                d.kind == DecisionKind.SKIP_APPROVAL
                and d.context["phase_id"] == pe.phase_id
                and d.context["iteration"] == pe.iteration
            ):
                raise PcpError(
                    "pending-decisions", f"skip approval {d.id} is still pending"
                )
        terminal = {te.task_id for te in current if te.state in TERMINAL_TASK_STATES}
        phase = model.phase(pe.phase_id)
        missing = sorted(t.id for t in phase.tasks if t.mandatory and t.id not in terminal)
        if missing:
            raise PcpError(
                "mandatory-task-incomplete",
                f"mandatory tasks {missing} are not terminal",
            )
        if not terminal:
            raise PcpError(
                "empty-iteration",
                "a phase iteration needs at least one completed or skipped task before it can close",
            )

    def request_phase_transition(
        self, instance_id: str, target_phase: str | None = None
    ) -> DecisionPoint | None:
        """Close the active phase and raise the entry decision at the target.

        With no target, the next phase by ordinal is chosen; requesting a
        transition off the end of the cycle completes the instance. Returns
        the PhaseEntry decision (already decided if it auto-resolved), or
        None when the instance completed.
        """
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                self._check_active(inst)
                pe = self._active_phase(inst)
                self._check_no_pending_entry(inst)
                model = self._model(inst)
                ordered = model.phases_by_ordinal()
                target: PhaseMetaModel | None
                if target_phase is None:
                    index = [p.id for p in ordered].index(pe.phase_id)
                    target = ordered[index + 1] if index + 1 < len(ordered) else None
                else:
                    target = model.phase(target_phase)
                    if target is None:
                        raise PcpError("unknown-phase", f"no phase {target_phase!r} in model")
                    if target.id == pe.phase_id:
                        raise PcpError(
                            "wrong-state",
                            "cannot transition a phase to itself; use loop_back to re-enter",
                        )
                if target is not None and inst.latest_iteration(target.id) == 0:
                    for c in model.phase_constraints:
                        if c.subject_phase != target.id:
                            continue
                        if not inst.phase_completed(c.requires_phase):
                            raise PcpError(
                                "phase-order-violation",
                                f"phase {target.id!r} may not begin before {c.requires_phase!r} has a completed iteration",
                            )
                if target is None:
                    pending = inst.pending_decisions()
                    if pending:
                        raise PcpError(
                            "pending-decisions",
                            f"instance cannot complete with pending decisions {[d.id for d in pending]}",
                        )
                    outstanding = inst.outstanding_tokens()
                    if outstanding:
                        raise PcpError(
                            "awaiting-external",
                            f"instance cannot complete with outstanding tokens {[t.token_id for t in outstanding]}",
                        )
                self._check_phase_closable(inst, model, pe)
            except PcpError as err:
                self._reject(
                    rt,
                    "request_phase_transition",
                    err,
                    {"target_phase": target_phase},
                )
                raise
            self._emit(
                rt,
                EventType.PHASE_COMPLETED,
                {
                    "phase_id": pe.phase_id,
                    "iteration": pe.iteration,
                    "instance_completed": target is None,
                },
            )
            if target is None:
                return None
            decision_id = f"{inst.id}.d{inst.counters['decision'] + 1}"
            options = target.entry_task_ids()
            self._emit(
                rt,
                EventType.DECISION_RAISED,
                {
                    "decision": {
                        "id": decision_id,
                        "kind": DecisionKind.PHASE_ENTRY.value,
                        "options": options,
                        "context": {
                            "source_phase": pe.phase_id,
                            "source_iteration": pe.iteration,
                            "target_phase": target.id,
                            "target_iteration": inst.latest_iteration(target.id) + 1,
                            "last_activity": inst.connectors[pe.phase_id].last_activity,
                        },
                    }
                },
            )
            if len(options) == 1 and not target.entry_decision_required:
                self._apply_resolution(rt, decision_id, options[0], SYSTEM_AGENT)
            return inst.decisions[decision_id]

    def loop_back(
        self, instance_id: str, target_phase: str, actor: str, reason: str
    ) -> DecisionPoint:
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                self._check_active(inst)
                self._check_no_pending_entry(inst)
                model = self._model(inst)
                target = model.phase(target_phase)
                if target is None:
                    raise PcpError("unknown-phase", f"no phase {target_phase!r} in model")
                if inst.latest_iteration(target.id) == 0:
                    raise PcpError(
                        "never-executed",
                        f"phase {target_phase!r} has never been entered; use a transition",
                    )
                pe = self._active_phase(inst)
            except PcpError as err:
                self._reject(
                    rt, "loop_back", err, {"target_phase": target_phase, "actor": actor}
                )
                raise
            decision_id = f"{inst.id}.d{inst.counters['decision'] + 1}"
            self._emit(
                rt,
                EventType.DECISION_RAISED,
                {
                    "decision": {
                        "id": decision_id,
                        "kind": DecisionKind.LOOP_BACK_TARGET.value,
                        "options": target.entry_task_ids(),
                        "context": {
                            "target_phase": target.id,
                            "source_phase": pe.phase_id,
                            "source_iteration": pe.iteration,
                            "requested_by": actor,
                            "reason": reason,
                            "last_activity": inst.connectors[pe.phase_id].last_activity,
                        },
                    }
                },
            )
            return inst.decisions[decision_id]

    def resolve_decision(
        self, instance_id: str, decision_id: str, choice: str, actor: str
    ) -> PolicyInstance:
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                decision = inst.decisions.get(decision_id)
                if decision is None:
                    raise PcpError("unknown-decision", f"no decision {decision_id!r}")
                if not decision.pending:
                    raise PcpError(
                        "already-decided",
                        f"decision {decision_id!r} was decided by {decision.decided_by!r}",
                    )
                if choice not in decision.options:
                    raise PcpError(
                        "invalid-choice",
                        f"choice {choice!r} not among options {decision.options}",
                    )
                self._validate_resolution(inst, decision, choice)
            except PcpError as err:
                self._reject(
                    rt,
                    "resolve_decision",
                    err,
                    {"decision_id": decision_id, "choice": choice, "actor": actor},
                )
                raise
            self._apply_resolution(rt, decision_id, choice, actor)
            return inst

    def _validate_resolution(
        self, inst: PolicyInstance, decision: DecisionPoint, choice: str
    ) -> None:
        self._check_active(inst)
        if decision.kind == DecisionKind.SKIP_APPROVAL and choice == "approve":
            ctx = decision.context
            pe = inst.active_phase_execution()
            if (
                pe is None
                or pe.phase_id != ctx["phase_id"]
                or pe.iteration != ctx["iteration"]
            ):
                raise PcpError(
                    "wrong-state",
                    "the phase iteration this skip was requested in is no longer active",
                )
            self._check_startable(inst, self._model(inst), pe, ctx["task_id"])

    def _apply_resolution(
        self, rt: _InstanceRuntime, decision_id: str, choice: str, actor: str
    ) -> None:
        inst = rt.instance
        decision = inst.decisions[decision_id]
        ctx = decision.context
        kind = decision.kind

        if kind == DecisionKind.PHASE_ENTRY:
            self._emit(
                rt,
                EventType.DECISION_RESOLVED,
                {"decision_id": decision_id, "choice": choice, "actor": actor},
            )
            self._emit(
                rt,
                EventType.PHASE_ENTERED,
                {
                    "phase_id": ctx["target_phase"],
                    "iteration": inst.latest_iteration(ctx["target_phase"]) + 1,
                    "entered_via": EnteredVia.TRANSITION.value,
                    "entry_task": choice,
                },
            )

        elif kind == DecisionKind.LOOP_BACK_TARGET:
            self._emit(
                rt,
                EventType.DECISION_RESOLVED,
                {"decision_id": decision_id, "choice": choice, "actor": actor},
            )
            active = inst.active_phase_execution()
            if active is not None:
                self._emit(
                    rt,
                    EventType.PHASE_COMPLETED,
                    {
                        "phase_id": active.phase_id,
                        "iteration": active.iteration,
                        "instance_completed": False,
                    },
                )
            self._emit(
                rt,
                EventType.LOOP_BACK,
                {
                    "phase_id": ctx["target_phase"],
                    "iteration": inst.latest_iteration(ctx["target_phase"]) + 1,
                    "entered_via": EnteredVia.LOOP_BACK.value,
                    "entry_task": choice,
                    "triggering_activity": f"act:decision:{decision_id}",
                    "reason": ctx["reason"],
                    "actor": actor,
                },
            )

        elif kind == DecisionKind.SKIP_APPROVAL:
            self._emit(
                rt,
                EventType.DECISION_RESOLVED,
                {"decision_id": decision_id, "choice": choice, "actor": actor},
            )
            if choice == "approve":
                exec_id = f"{inst.id}.t{inst.counters['exec'] + 1}"
                self._emit(
                    rt,
                    EventType.TASK_SKIPPED,
                    {
                        "exec_id": exec_id,
                        "created": True,
                        "task_id": ctx["task_id"],
                        "phase_id": ctx["phase_id"],
                        "iteration": ctx["iteration"],
                        "actor": actor,
                        "reason": ctx["reason"],
                        "decision_id": decision_id,
                        "summary": f"{ctx['task_id']} skipped by {actor}",
                    },
                )

        elif kind == DecisionKind.TOKEN_EXPIRY:
            token = inst.tokens[ctx["token_id"]]
            te = inst.task_executions[token.task_exec_id]
            if choice == "Redispatch":
                self._emit(
                    rt,
                    EventType.DECISION_RESOLVED,
                    {"decision_id": decision_id, "choice": choice, "actor": actor},
                )
                duration = parse_ts(token.deadline) - parse_ts(token.issued_at)
                new_id = f"{inst.id}.k{inst.counters['token'] + 1}"
                self._emit(
                    rt,
                    EventType.AWAITING_EXTERNAL,
                    {
                        "token": {
                            "token_id": new_id,
                            "task_exec_id": token.task_exec_id,
                            "destination": token.destination,
                            "requested_details": token.requested_details,
                            "deadline": (
                                parse_ts(self.clock.now()) + duration
                            ).isoformat(timespec="microseconds"),
                            "redispatch_of": token.token_id,
                        }
                    },
                )
            elif choice == "SkipConsultation":
                self._emit(
                    rt,
                    EventType.DECISION_RESOLVED,
                    {
                        "decision_id": decision_id,
                        "choice": choice,
                        "actor": actor,
                        "effect": {"resume_exec": te.exec_id},
                    },
                )
            else:  # AbandonTask
                self._emit(
                    rt,
                    EventType.DECISION_RESOLVED,
                    {"decision_id": decision_id, "choice": choice, "actor": actor},
                )
                self._emit(
                    rt,
                    EventType.TASK_SKIPPED,
                    {
                        "exec_id": te.exec_id,
                        "created": False,
                        "task_id": te.task_id,
                        "phase_id": te.phase_id,
                        "iteration": te.iteration,
                        "actor": actor,
                        "reason": f"abandoned after token {token.token_id} expired",
                        "decision_id": decision_id,
                        "summary": f"{te.task_id} abandoned by {actor}",
                    },
                )

        else:  # NextTask has no engine-side effect beyond the record
            self._emit(
                rt,
                EventType.DECISION_RESOLVED,
                {"decision_id": decision_id, "choice": choice, "actor": actor},
            )

    # -- external routing hooks (used by ExternalConnector) ---------------

    def reject_command(self, instance_id: str, command: str, err: PcpError, params: dict[str, Any]) -> None:
        """Record a rejection decided outside the engine (e.g. routing checks)."""
        rt = self._runtime(instance_id)
        with rt.lock:
            self._reject(rt, command, err, params)

    def dispatch_token(
        self,
        instance_id: str,
        task_exec_id: str,
        destination: str,
        details: dict[str, Any],
        deadline: str,
    ) -> Token:
        rt = self._runtime(instance_id)
        with rt.lock:
            inst = rt.instance
            try:
                self._check_active(inst)
                te = inst.task_executions.get(task_exec_id)
                if te is None:
                    raise PcpError("unknown-execution", f"no execution {task_exec_id!r}")
                if te.state != TaskState.IN_PROGRESS:
                    raise PcpError(
                        "wrong-state",
                        f"execution {task_exec_id!r} is {te.state.value}; only an in-progress task can dispatch",
                    )
                pe = self._active_phase(inst)
                if (te.phase_id, te.iteration) != (pe.phase_id, pe.iteration):
                    raise PcpError(
                        "wrong-state",
                        f"execution {task_exec_id!r} belongs to a closed phase iteration",
                    )
                model = self._model(inst)
                _, task = model.find_task(te.task_id)
                if not task.external_consult_allowed:
                    raise PcpError(
                        "consult-not-allowed",
                        f"task {te.task_id!r} does not allow external consultation",
                    )
                try:
                    parse_ts(deadline)
                except ValueError:
                    raise PcpError("malformed", f"deadline {deadline!r} is not a timestamp") from None
            except PcpError as err:
                self._reject(
                    rt,
                    "dispatch_token",
                    err,
                    {"task_exec_id": task_exec_id, "destination": destination},
                )
                raise
            token_id = f"{inst.id}.k{inst.counters['token'] + 1}"
            self._emit(
                rt,
                EventType.AWAITING_EXTERNAL,
                {
                    "token": {
                        "token_id": token_id,
                        "task_exec_id": task_exec_id,
                        "destination": destination,
                        "requested_details": details,
                        "deadline": deadline,
                        "redispatch_of": None,
                    }
                },
            )
            return inst.tokens[token_id]

    def receive_response(
        self, token_id: str, payload: dict[str, Any], responder: str
    ) -> PolicyInstance:
        token = self.find_token(token_id)  # unknown-token propagates (no instance to log to)
        rt = self._runtime(token.instance_id)
        with rt.lock:
            inst = rt.instance
            token = inst.tokens[token_id]
            try:
                if token.state == TokenState.RESPONDED:
                    raise PcpError(
                        "duplicate-response", f"token {token_id!r} was already answered"
                    )
                if token.state == TokenState.EXPIRED:
                    raise PcpError("token-expired", f"token {token_id!r} has expired")
                if parse_ts(self.clock.now()) > parse_ts(token.deadline):
                    raise PcpError(
                        "token-expired", f"token {token_id!r} deadline has passed"
                    )
                if not isinstance(payload, dict) or "kind" not in payload or "content" not in payload:
                    raise PcpError(
                        "malformed", "response payload must be an object with kind and content"
                    )
            except PcpError as err:
                self._reject(
                    rt,
                    "receive_response",
                    err,
                    {"token_id": token_id, "responder": responder},
                )
                raise
            self._emit(
                rt,
                EventType.EXTERNAL_RECEIVED,
                {
                    "token_id": token_id,
                    "task_exec_id": token.task_exec_id,
                    "entity_id": f"{token_id}.payload",
                    "payload": {"kind": payload["kind"], "content": payload["content"]},
                    "responder": responder,
                },
            )
            return inst

    def expire_tokens(self, now: str | None = None) -> list[DecisionPoint]:
        """Expire every overdue Dispatched token and raise one expiry decision each."""
        if now is None:
            now = self.clock.now()
        raised: list[DecisionPoint] = []
        for instance_id in self.instance_ids():
            rt = self._runtime(instance_id)
            with rt.lock:
                inst = rt.instance
                overdue = [
                    t
                    for t in inst.outstanding_tokens()
                    if parse_ts(t.deadline) < parse_ts(now)
                ]
                for token in overdue:
                    te = inst.task_executions[token.task_exec_id]
                    decision_id = f"{inst.id}.d{inst.counters['decision'] + 1}"
                    self._emit(
                        rt,
                        EventType.DECISION_RAISED,
                        {
                            "decision": {
                                "id": decision_id,
                                "kind": DecisionKind.TOKEN_EXPIRY.value,
                                "options": list(EXPIRY_OPTIONS),
                                "context": {
                                    "token_id": token.token_id,
                                    "task_exec_id": token.task_exec_id,
                                    "task_id": te.task_id,
                                    "phase_id": te.phase_id,
                                    "iteration": te.iteration,
                                    "destination": token.destination,
                                    "deadline": token.deadline,
                                },
                            }
                        },
                    )
                    raised.append(inst.decisions[decision_id])
        return raised
