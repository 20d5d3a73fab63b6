"""Provenance capture: map engine events to PROV-style graph deltas.

Every accepted engine event becomes one small, self-contained bundle of
entities, activities, agents, and relations (a ProvDocument); rejected
commands are non-actions and map to nothing. The mapping is a pure function
of (event, instance state at that event), so replaying a log regenerates
exactly the documents captured live.

The PROV core vocabulary is used as-is (used, wasGeneratedBy,
wasAssociatedWith, wasAttributedTo, wasDerivedFrom, wasInformedBy);
workflow-specific fields travel in a namespaced ``pcp:*`` attribute bag
rather than as invented relation types.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .engine import SYSTEM_AGENT, PolicyInstance
from .errors import PcpError
from .events import EngineEvent, EventType


class EntityKind(str, Enum):
    ARTIFACT = "Artifact"
    POLICY_DRAFT = "PolicyDraft"
    DATASET = "Dataset"
    TOKEN_PAYLOAD = "TokenPayload"
    COMMENT = "Comment"
    META_MODEL_DOC = "MetaModelDoc"


class ActivityType(str, Enum):
    TASK_EXECUTION = "TaskExecution"
    DECISION = "Decision"
    TOKEN_DISPATCH = "TokenDispatch"
    TOKEN_RECEIPT = "TokenReceipt"
    PHASE_TRANSITION = "PhaseTransition"
    LOOP_BACK = "LoopBack"
    INSTANCE_CREATION = "InstanceCreation"


class AgentType(str, Enum):
    PERSON = "Person"
    DEPARTMENT = "Department"
    SOFTWARE_AGENT = "SoftwareAgent"


class RelationKind(str, Enum):
    USED = "used"
    WAS_GENERATED_BY = "wasGeneratedBy"
    WAS_ASSOCIATED_WITH = "wasAssociatedWith"
    WAS_ATTRIBUTED_TO = "wasAttributedTo"
    WAS_DERIVED_FROM = "wasDerivedFrom"
    WAS_INFORMED_BY = "wasInformedBy"


# source class, target class, and the JSON keys each endpoint serializes under
RELATION_SIGNATURES: dict[RelationKind, tuple[str, str, str, str]] = {
    RelationKind.USED: ("activity", "entity", "prov:activity", "prov:entity"),
    RelationKind.WAS_GENERATED_BY: ("entity", "activity", "prov:entity", "prov:activity"),
    RelationKind.WAS_ASSOCIATED_WITH: ("activity", "agent", "prov:activity", "prov:agent"),
    RelationKind.WAS_ATTRIBUTED_TO: ("entity", "agent", "prov:entity", "prov:agent"),
    RelationKind.WAS_DERIVED_FROM: ("entity", "entity", "prov:generatedEntity", "prov:usedEntity"),
    RelationKind.WAS_INFORMED_BY: ("activity", "activity", "prov:informed", "prov:informant"),
}


@dataclass(frozen=True)
class ProvEntity:
    id: str
    kind: EntityKind
    generated_at: str
    attributes: dict[str, Any] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class ProvActivity:
    id: str
    type: ActivityType
    started_at: str
    ended_at: str | None = None
    attributes: dict[str, Any] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class ProvAgent:
    id: str
    type: AgentType
    attributes: dict[str, Any] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class ProvRelation:
    kind: RelationKind
    source: str
    target: str
    role: str | None = None
    at: str | None = None


@dataclass
class ProvDocument:
    """One closed bundle of graph deltas derived from a single engine event."""

    bundle: str
    instance_id: str
    source_seq: tuple[int, int]
    emitted_at: str
    entities: list[ProvEntity] = field(default_factory=list)
    activities: list[ProvActivity] = field(default_factory=list)
    agents: list[ProvAgent] = field(default_factory=list)
    relations: list[ProvRelation] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "bundle": self.bundle,
            "instance_id": self.instance_id,
            "source_seq": list(self.source_seq),
            "emitted_at": self.emitted_at,
            "entity": {
                e.id: {"pcp:kind": e.kind.value, "pcp:generated_at": e.generated_at, **e.attributes}
                for e in self.entities
            },
            "activity": {
                a.id: {
                    "pcp:type": a.type.value,
                    "prov:startTime": a.started_at,
                    "prov:endTime": a.ended_at,
                    **a.attributes,
                }
                for a in self.activities
            },
            "agent": {
                g.id: {"prov:type": f"prov:{g.type.value}", **g.attributes}
                for g in self.agents
            },
        }
        for kind in RelationKind:
            _, _, source_key, target_key = RELATION_SIGNATURES[kind]
            section: dict[str, Any] = {}
            index = 0
            for rel in self.relations:
                if rel.kind != kind:
                    continue
                index += 1
                rel_id = f"_:{kind.value}:{index}"
                entry: dict[str, Any] = {source_key: rel.source, target_key: rel.target}
                if rel.role is not None:
                    entry["prov:role"] = rel.role
                if rel.at is not None:
                    entry["prov:time"] = rel.at
                section[rel_id] = entry
            doc[kind.value] = section
        return doc

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProvDocument":
        try:
            doc = cls(
                bundle=data["bundle"],
                instance_id=data["instance_id"],
                source_seq=(int(data["source_seq"][0]), int(data["source_seq"][1])),
                emitted_at=data["emitted_at"],
            )
            for eid, attrs in data.get("entity", {}).items():
                attrs = dict(attrs)
                doc.entities.append(
                    ProvEntity(
                        id=eid,
                        kind=EntityKind(attrs.pop("pcp:kind")),
                        generated_at=attrs.pop("pcp:generated_at"),
                        attributes=attrs,
                    )
                )
            for aid, attrs in data.get("activity", {}).items():
                attrs = dict(attrs)
                doc.activities.append(
                    ProvActivity(
                        id=aid,
                        type=ActivityType(attrs.pop("pcp:type")),
                        started_at=attrs.pop("prov:startTime"),
                        ended_at=attrs.pop("prov:endTime", None),
                        attributes=attrs,
                    )
                )
            for gid, attrs in data.get("agent", {}).items():
                attrs = dict(attrs)
                prov_type = attrs.pop("prov:type")
                doc.agents.append(
                    ProvAgent(
                        id=gid,
                        type=AgentType(prov_type.removeprefix("prov:")),
                        attributes=attrs,
                    )
                )
            for kind in RelationKind:
                _, _, source_key, target_key = RELATION_SIGNATURES[kind]
                for entry in data.get(kind.value, {}).values():
                    doc.relations.append(
                        ProvRelation(
                            kind=kind,
                            source=entry[source_key],
                            target=entry[target_key],
                            role=entry.get("prov:role"),
                            at=entry.get("prov:time"),
                        )
                    )
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            raise PcpError("invalid-document", f"malformed provenance document: {exc!r}") from None
        return doc


class _Delta:
    """Accumulates one document's worth of graph additions."""

    def __init__(self, event: EngineEvent) -> None:
        self.doc = ProvDocument(
            bundle=f"{event.instance_id}.b{event.seq}",
            instance_id=event.instance_id,
            source_seq=(event.seq, event.seq),
            emitted_at=event.at,
        )

    _ENTITY_RESERVED = ("pcp:kind", "pcp:generated_at")
    _ACTIVITY_RESERVED = ("pcp:type", "prov:startTime", "prov:endTime")

    def entity(self, eid: str, kind: EntityKind, generated_at: str, **attrs: Any) -> str:
        assert not set(attrs) & set(self._ENTITY_RESERVED), "attribute shadows a core field"
        self.doc.entities.append(ProvEntity(eid, kind, generated_at, attrs))
        return eid

    def activity(
        self,
        aid: str,
        atype: ActivityType,
        started_at: str,
        ended_at: str | None,
        **attrs: Any,
    ) -> str:
        assert not set(attrs) & set(self._ACTIVITY_RESERVED), "attribute shadows a core field"
        self.doc.activities.append(ProvActivity(aid, atype, started_at, ended_at, attrs))
        return aid

    def agent(self, agent_id: str) -> str:
        atype = AgentType.SOFTWARE_AGENT if agent_id == SYSTEM_AGENT else AgentType.PERSON
        self.doc.agents.append(ProvAgent(agent_id, atype))
        return agent_id

    def relate(
        self,
        kind: RelationKind,
        source: str,
        target: str,
        role: str | None = None,
        at: str | None = None,
    ) -> None:
        self.doc.relations.append(ProvRelation(kind, source, target, role, at))


def activity_id_for(event_type: EventType, payload: dict[str, Any], instance_id: str) -> str:
    """Deterministic activity id for the activity an event describes."""
    p = payload
    if event_type == EventType.INSTANCE_CREATED:
        return f"act:instance:{instance_id}"
    if event_type in (EventType.TASK_STARTED, EventType.TASK_COMPLETED, EventType.TASK_SKIPPED):
        return f"act:task:{p['exec_id']}"
    if event_type in (EventType.DECISION_RAISED,):
        return f"act:decision:{p['decision']['id']}"
    if event_type == EventType.DECISION_RESOLVED:
        return f"act:decision:{p['decision_id']}"
    if event_type == EventType.AWAITING_EXTERNAL:
        return f"act:dispatch:{p['token']['token_id']}"
    if event_type == EventType.EXTERNAL_RECEIVED:
        return f"act:receipt:{p['token_id']}"
    if event_type == EventType.PHASE_ENTERED:
        return f"act:phase:{instance_id}:{p['phase_id']}:{p['iteration']}:entered"
    if event_type == EventType.PHASE_COMPLETED:
        return f"act:phase:{instance_id}:{p['phase_id']}:{p['iteration']}:completed"
    if event_type == EventType.LOOP_BACK:
        return f"act:loopback:{instance_id}:{p['phase_id']}:{p['iteration']}"
    raise ValueError(f"no activity for {event_type}")


def map_event(event: EngineEvent, instance: PolicyInstance) -> ProvDocument | None:
    """Derive one document from an event, or None for rejected commands.

    ``instance`` must reflect state as of this event's seq (the engine calls
    observers immediately after applying each event).
    """
    etype = event.type
    if etype == EventType.COMMAND_REJECTED:
        return None

    p = event.payload
    d = _Delta(event)
    at = event.at

    def base_attrs(phase: str | None = None, iteration: int | None = None) -> dict[str, Any]:
        attrs: dict[str, Any] = {
            "pcp:instance": instance.id,
            "pcp:model_version": instance.model_version,
        }
        if phase is not None:
            attrs["pcp:phase"] = phase
        if iteration is not None:
            attrs["pcp:iteration"] = iteration
        return attrs

    if etype == EventType.INSTANCE_CREATED:
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.INSTANCE_CREATION,
            at,
            at,
            **base_attrs(),
        )
        model_entity = d.entity(
            f"model:{p['model_version']}",
            EntityKind.META_MODEL_DOC,
            at,
            **{"pcp:version": p["model_version"]},
        )
        d.relate(RelationKind.USED, act, model_entity, at=at)
        d.relate(RelationKind.WAS_ASSOCIATED_WITH, act, d.agent(p["created_by"]))

    elif etype == EventType.TASK_STARTED:
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.TASK_EXECUTION,
            at,
            None,
            **base_attrs(p["phase_id"], p["iteration"]),
            **{"pcp:task": p["task_id"]},
        )
        d.relate(RelationKind.WAS_ASSOCIATED_WITH, act, d.agent(p["actor"]))

    elif etype == EventType.TASK_COMPLETED:
        te = instance.task_executions[p["exec_id"]]
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.TASK_EXECUTION,
            te.started_at,
            at,
            **base_attrs(p["phase_id"], p["iteration"]),
            **{"pcp:task": p["task_id"], "pcp:outcome": "completed"},
        )
        actor = d.agent(p["actor"])
        d.relate(RelationKind.WAS_ASSOCIATED_WITH, act, actor)
        for output_id in p["outputs"]:
            d.entity(output_id, EntityKind.ARTIFACT, at)
            d.relate(RelationKind.WAS_GENERATED_BY, output_id, act, at=at)
            d.relate(RelationKind.WAS_ATTRIBUTED_TO, output_id, actor)
        for input_id in te.inputs:
            d.relate(RelationKind.USED, act, input_id, at=at)

    elif etype == EventType.TASK_SKIPPED:
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.TASK_EXECUTION,
            at,
            at,
            **base_attrs(p["phase_id"], p["iteration"]),
            **{
                "pcp:task": p["task_id"],
                "pcp:outcome": "skipped",
                "pcp:reason": p["reason"],
                "pcp:decision": p["decision_id"],
            },
        )
        d.relate(RelationKind.WAS_ASSOCIATED_WITH, act, d.agent(p["actor"]))

    elif etype == EventType.DECISION_RAISED:
        decision = p["decision"]
        ctx = decision["context"]
        d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.DECISION,
            at,
            None,
            **base_attrs(
                ctx.get("phase_id") or ctx.get("target_phase"), ctx.get("iteration")
            ),
            **{"pcp:decision": decision["id"], "pcp:kind": decision["kind"]},
        )

    elif etype == EventType.DECISION_RESOLVED:
        decision = instance.decisions[p["decision_id"]]
        ctx = decision.context
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.DECISION,
            decision.raised_at,
            at,
            **base_attrs(
                ctx.get("phase_id") or ctx.get("target_phase"), ctx.get("iteration")
            ),
            **{
                "pcp:decision": decision.id,
                "pcp:kind": decision.kind.value,
                "pcp:chosen": p["choice"],
            },
        )
        context_entity = d.entity(
            f"{decision.id}.context",
            EntityKind.COMMENT,
            at,
            **{"pcp:options": list(decision.options), "pcp:chosen": p["choice"]},
        )
        d.relate(RelationKind.USED, act, context_entity, at=at)
        d.relate(RelationKind.WAS_ASSOCIATED_WITH, act, d.agent(p["actor"]))

    elif etype == EventType.AWAITING_EXTERNAL:
        token = p["token"]
        te = instance.task_executions[token["task_exec_id"]]
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.TOKEN_DISPATCH,
            at,
            at,
            **base_attrs(te.phase_id, te.iteration),
            **{
                "pcp:token": token["token_id"],
                "pcp:destination": token["destination"],
                "pcp:task_exec": token["task_exec_id"],
            },
        )
        request_entity = d.entity(
            f"{token['token_id']}.request",
            EntityKind.COMMENT,
            at,
            **{
                "pcp:text": token["requested_details"].get("text", ""),
                "pcp:expected_kind": token["requested_details"].get("expected_kind", ""),
            },
        )
        d.relate(RelationKind.USED, act, request_entity, at=at)

    elif etype == EventType.EXTERNAL_RECEIVED:
        token = instance.tokens[p["token_id"]]
        te = instance.task_executions[p["task_exec_id"]]
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.TOKEN_RECEIPT,
            at,
            at,
            **base_attrs(te.phase_id, te.iteration),
            **{"pcp:token": p["token_id"], "pcp:responder": p["responder"]},
        )
        payload_entity = d.entity(
            p["entity_id"],
            EntityKind.TOKEN_PAYLOAD,
            at,
            **{
                "pcp:payload_kind": p["payload"]["kind"],
                "pcp:content": p["payload"]["content"],
            },
        )
        d.relate(RelationKind.WAS_GENERATED_BY, payload_entity, act, at=at)
        d.relate(RelationKind.WAS_ATTRIBUTED_TO, payload_entity, d.agent(p["responder"]))
        d.relate(RelationKind.WAS_INFORMED_BY, act, f"act:dispatch:{p['token_id']}")

    elif etype == EventType.PHASE_ENTERED:
        d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.PHASE_TRANSITION,
            at,
            at,
            **base_attrs(p["phase_id"], p["iteration"]),
            **{
                "pcp:direction": "entered",
                "pcp:entered_via": p["entered_via"],
                "pcp:entry_task": p.get("entry_task"),
            },
        )

    elif etype == EventType.PHASE_COMPLETED:
        d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.PHASE_TRANSITION,
            at,
            at,
            **base_attrs(p["phase_id"], p["iteration"]),
            **{
                "pcp:direction": "completed",
                "pcp:instance_completed": bool(p.get("instance_completed")),
            },
        )

    elif etype == EventType.LOOP_BACK:
        act = d.activity(
            activity_id_for(etype, p, instance.id),
            ActivityType.LOOP_BACK,
            at,
            at,
            **base_attrs(p["phase_id"], p["iteration"]),
            **{"pcp:reason": p["reason"], "pcp:entry_task": p.get("entry_task")},
        )
        d.relate(RelationKind.WAS_INFORMED_BY, act, p["triggering_activity"])
        d.relate(RelationKind.WAS_ASSOCIATED_WITH, act, d.agent(p["actor"]))

    else:  # pragma: no cover - the enum is closed
        raise PcpError("invalid-document", f"unhandled event type {etype}")

    return d.doc


class CapturePipeline:
    """Feeds mapped documents to a recorder sink, in event order.

    The sink's append must be idempotent on (instance_id, source_seq); at-
    least-once emission (e.g. on restart replay) then converges to exactly
    one stored record per event.
    """

    def __init__(self, sink: Any) -> None:
        self.sink = sink

    def on_event(self, event: EngineEvent, instance: PolicyInstance) -> None:
        document = map_event(event, instance)
        if document is not None:
            self.sink.append(document)


def emit_document(document: ProvDocument, sink: Any) -> int:
    """Append one document; returns the recorder's stored sequence number."""
    return sink.append(document)
