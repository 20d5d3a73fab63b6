"""Provenance recorder: durable append-only log plus a derived property graph.

Storage is one JSON document per line in an append-only file (or memory-only
when no path is given); the in-memory graph is rebuilt from the log at
startup and is a pure function of it. Appends are idempotent on
(instance_id, source_seq): re-emitting a document returns the original
store_seq and grows nothing.

Canonical graph serialization sorts nodes by id and edges by
(kind, source, target, role), which makes replay/rebuild/restart
comparisons exact byte equality.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import PcpError
from .events import canonical_json
from .prov import (
    ProvDocument,
    RelationKind,
    RELATION_SIGNATURES,
)

ANCESTOR_KINDS = (
    RelationKind.WAS_GENERATED_BY,
    RelationKind.USED,
    RelationKind.WAS_DERIVED_FROM,
    RelationKind.WAS_INFORMED_BY,
)

AGENT_KINDS = (RelationKind.WAS_ASSOCIATED_WITH, RelationKind.WAS_ATTRIBUTED_TO)


@dataclass(frozen=True)
class StoreRecord:
    store_seq: int
    instance_id: str
    source_seq: tuple[int, int]
    appended_at: str
    document: ProvDocument

    def to_dict(self) -> dict[str, Any]:
        return {
            "store_seq": self.store_seq,
            "instance_id": self.instance_id,
            "source_seq": list(self.source_seq),
            "appended_at": self.appended_at,
            "document": self.document.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StoreRecord":
        return cls(
            store_seq=int(data["store_seq"]),
            instance_id=data["instance_id"],
            source_seq=(int(data["source_seq"][0]), int(data["source_seq"][1])),
            appended_at=data["appended_at"],
            document=ProvDocument.from_dict(data["document"]),
        )


@dataclass(frozen=True)
class Edge:
    kind: RelationKind
    source: str
    target: str
    role: str | None = None
    at: str | None = None

    def key(self) -> tuple[str, str, str, str]:
        return (self.kind.value, self.source, self.target, self.role or "")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "source": self.source,
            "target": self.target,
            "role": self.role,
            "at": self.at,
        }


class ProvGraph:
    """Union of all appended documents: typed nodes plus typed edges.

    Node records are full attribute dicts; a node re-emitted in a later
    document replaces the earlier record (deltas always carry the complete
    node state as of their event). Nodes and edges remember the store_seq
    and instance that first contributed them.
    """

    def __init__(self) -> None:
        self.entities: dict[str, dict[str, Any]] = {}
        self.activities: dict[str, dict[str, Any]] = {}
        self.agents: dict[str, dict[str, Any]] = {}
        self.edges: dict[tuple[str, str, str, str], Edge] = {}
        self.node_origin: dict[str, int] = {}
        self.edge_origin: dict[tuple[str, str, str, str], int] = {}
        self.node_instances: dict[str, set[str]] = {}
        self.edge_instances: dict[tuple[str, str, str, str], set[str]] = {}

    def _section(self, node_class: str) -> dict[str, dict[str, Any]]:
        return {"entity": self.entities, "activity": self.activities, "agent": self.agents}[
            node_class
        ]

    def has_node(self, node_class: str, node_id: str) -> bool:
        return node_id in self._section(node_class)

    def add_document(self, document: ProvDocument, store_seq: int) -> None:
        instance_id = document.instance_id
        for e in document.entities:
            self.entities[e.id] = {
                "pcp:kind": e.kind.value,
                "pcp:generated_at": e.generated_at,
                **e.attributes,
            }
            self.node_origin.setdefault(e.id, store_seq)
            self.node_instances.setdefault(e.id, set()).add(instance_id)
        for a in document.activities:
            self.activities[a.id] = {
                "pcp:type": a.type.value,
                "prov:startTime": a.started_at,
                "prov:endTime": a.ended_at,
                **a.attributes,
            }
            self.node_origin.setdefault(a.id, store_seq)
            self.node_instances.setdefault(a.id, set()).add(instance_id)
        for g in document.agents:
            self.agents[g.id] = {"prov:type": f"prov:{g.type.value}", **g.attributes}
            self.node_origin.setdefault(g.id, store_seq)
            self.node_instances.setdefault(g.id, set()).add(instance_id)
        for rel in document.relations:
            edge = Edge(rel.kind, rel.source, rel.target, rel.role, rel.at)
            if edge.key() not in self.edges:
                self.edges[edge.key()] = edge
                self.edge_origin[edge.key()] = store_seq
            self.edge_instances.setdefault(edge.key(), set()).add(instance_id)

    def sorted_edges(self) -> list[Edge]:
        return [self.edges[k] for k in sorted(self.edges)]

    def canonical_dict(self) -> dict[str, Any]:
        return {
            "entities": {k: self.entities[k] for k in sorted(self.entities)},
            "activities": {k: self.activities[k] for k in sorted(self.activities)},
            "agents": {k: self.agents[k] for k in sorted(self.agents)},
            "edges": [e.to_dict() for e in self.sorted_edges()],
        }

    def canonical_json(self) -> str:
        return canonical_json(self.canonical_dict())

    def node_class(self, node_id: str) -> str | None:
        if node_id in self.entities:
            return "entity"
        if node_id in self.activities:
            return "activity"
        if node_id in self.agents:
            return "agent"
        return None

    def subgraph(self, node_ids: set[str], edges: Iterable[Edge]) -> "ProvGraph":
        sub = ProvGraph()
        for nid in node_ids:
            for section_name in ("entities", "activities", "agents"):
                section = getattr(self, section_name)
                if nid in section:
                    getattr(sub, section_name)[nid] = dict(section[nid])
                    sub.node_origin[nid] = self.node_origin.get(nid, 0)
        for edge in edges:
            sub.edges[edge.key()] = edge
            sub.edge_origin[edge.key()] = self.edge_origin.get(edge.key(), 0)
        return sub


def _validate_document(document: ProvDocument, graph: ProvGraph) -> None:
    """Schema check: every relation endpoint exists (bundle or graph) with
    the node class its PROV signature demands."""
    bundle = {
        "entity": {e.id for e in document.entities},
        "activity": {a.id for a in document.activities},
        "agent": {g.id for g in document.agents},
    }
    for rel in document.relations:
        source_class, target_class, _, _ = RELATION_SIGNATURES[rel.kind]
        for node_id, node_class, end in (
            (rel.source, source_class, "source"),
            (rel.target, target_class, "target"),
        ):
            if node_id in bundle[node_class] or graph.has_node(node_class, node_id):
                continue
            raise PcpError(
                "invalid-document",
                f"{rel.kind.value} {end} {node_id!r} is not a known {node_class}",
                bundle=document.bundle,
            )
    for a in document.activities:
        if a.ended_at is not None and a.ended_at < a.started_at:
            raise PcpError(
                "invalid-document",
                f"activity {a.id!r} ends before it starts",
                bundle=document.bundle,
            )


class ProvenanceStore:
    """Single-appender recorder with unlimited concurrent readers.

    With a path, every append is flushed and fsynced before returning and
    the log is reloaded on construction (crash recovery = reread the file).
    """

    def __init__(self, path: str | Path | None = None, clock: Any | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.records: list[StoreRecord] = []
        self.graph = ProvGraph()
        self._by_key: dict[tuple[str, tuple[int, int]], int] = {}
        self._lock = threading.RLock()
        self._fh = None
        if self.path is not None:
            if self.path.exists():
                self._load()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = StoreRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, PcpError) as exc:
                    raise PcpError(
                        "invalid-document",
                        f"corrupt store record at line {lineno}: {exc}",
                    ) from None
                self.records.append(record)
                self._by_key[(record.instance_id, record.source_seq)] = record.store_seq
                self.graph.add_document(record.document, record.store_seq)

    def _now(self) -> str:
        if self.clock is not None:
            return self.clock.now()
        from .events import UtcClock

        if not hasattr(self, "_fallback_clock"):
            self._fallback_clock = UtcClock()
        return self._fallback_clock.now()

    def append(
        self,
        document: ProvDocument,
        instance_id: str | None = None,
        source_seq: tuple[int, int] | None = None,
    ) -> int:
        """Durably append one document; duplicate keys return the original seq.

        instance_id/source_seq default to the document's own; passing them
        lets a caller key the append explicitly (they must agree).
        """
        instance_id = instance_id if instance_id is not None else document.instance_id
        source_seq = source_seq if source_seq is not None else document.source_seq
        if (instance_id, source_seq) != (document.instance_id, document.source_seq):
            raise PcpError(
                "invalid-document",
                f"append key ({instance_id}, {source_seq}) disagrees with the document's",
            )
        with self._lock:
            key = (instance_id, source_seq)
            existing = self._by_key.get(key)
            if existing is not None:
                return existing
            _validate_document(document, self.graph)
            record = StoreRecord(
                store_seq=len(self.records) + 1,
                instance_id=instance_id,
                source_seq=source_seq,
                appended_at=self._now(),
                document=document,
            )
            if self._fh is not None:
                # Insertion order keeps store_seq/instance_id/source_seq/
                # appended_at as the line's leading fields.
                self._fh.write(json.dumps(record.to_dict()) + "\n")
                self._fh.flush()
                os.fsync(self._fh.fileno())
            self.records.append(record)
            self._by_key[key] = record.store_seq
            self.graph.add_document(document, record.store_seq)
            return record.store_seq

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def instance_records(self, instance_id: str) -> list[StoreRecord]:
        with self._lock:
            return [r for r in self.records if r.instance_id == instance_id]

    # -- queries -----------------------------------------------------------

    def lineage(self, entity_id: str) -> ProvGraph:
        return lineage(self.graph, entity_id)

    def audit_trail(self, instance_id: str) -> list[dict[str, Any]]:
        return audit_trail(self.graph, instance_id)

    def query(self, **filters: Any) -> list[dict[str, Any]]:
        return query(self.graph, **filters)

    def export_instance(self, instance_id: str) -> ProvDocument:
        return export_prov(self, instance_id)


def rebuild(records: Iterable[StoreRecord]) -> ProvGraph:
    """Deterministically derive the graph from an ordered record log."""
    graph = ProvGraph()
    for record in sorted(records, key=lambda r: r.store_seq):
        graph.add_document(record.document, record.store_seq)
    return graph


def lineage(graph: ProvGraph, entity_id: str) -> ProvGraph:
    """Ancestor subgraph of an entity.

    Walks wasGeneratedBy (entity to generating activity), used (activity to
    its inputs), wasDerivedFrom, and wasInformedBy, then attaches the agents
    of every included node.
    """
    if entity_id not in graph.entities:
        raise PcpError("unknown-entity", f"no entity {entity_id!r}")
    by_source: dict[str, list[Edge]] = {}
    for edge in graph.edges.values():
        if edge.kind in ANCESTOR_KINDS:
            by_source.setdefault(edge.source, []).append(edge)

    included: set[str] = {entity_id}
    edges: list[Edge] = []
    frontier = [entity_id]
    while frontier:
        node = frontier.pop()
        for edge in by_source.get(node, ()):
            edges.append(edge)
            if edge.target not in included:
                included.add(edge.target)
                frontier.append(edge.target)

    for edge in graph.edges.values():
        if edge.kind in AGENT_KINDS and edge.source in included:
            edges.append(edge)
            included.add(edge.target)
    return graph.subgraph(included, edges)


def _activity_view(graph: ProvGraph, activity_id: str) -> dict[str, Any]:
    record = dict(graph.activities[activity_id])
    agents = sorted(
        e.target
        for e in graph.edges.values()
        if e.kind == RelationKind.WAS_ASSOCIATED_WITH and e.source == activity_id
    )
    used = sorted(
        e.target
        for e in graph.edges.values()
        if e.kind == RelationKind.USED and e.source == activity_id
    )
    generated = sorted(
        e.source
        for e in graph.edges.values()
        if e.kind == RelationKind.WAS_GENERATED_BY and e.target == activity_id
    )
    return {
        "id": activity_id,
        "store_seq": graph.node_origin.get(activity_id, 0),
        **record,
        "agents": agents,
        "used": used,
        "generated": generated,
    }


def audit_trail(graph: ProvGraph, instance_id: str) -> list[dict[str, Any]]:
    """All activities of one instance ordered by (startTime, store_seq).

    An unknown instance yields an empty list; trails are exploratory.
    """
    views = [
        _activity_view(graph, aid)
        for aid, attrs in graph.activities.items()
        if attrs.get("pcp:instance") == instance_id
    ]
    views.sort(key=lambda v: (v["prov:startTime"], v["store_seq"]))
    return views


def query(
    graph: ProvGraph,
    agent: str | None = None,
    phase: str | None = None,
    activity_type: str | None = None,
    time_from: str | None = None,
    time_to: str | None = None,
) -> list[dict[str, Any]]:
    """Conjunctive activity filter; empty filter returns every activity."""
    agent_of: dict[str, set[str]] = {}
    for edge in graph.edges.values():
        if edge.kind == RelationKind.WAS_ASSOCIATED_WITH:
            agent_of.setdefault(edge.source, set()).add(edge.target)
    results = []
    for aid, attrs in graph.activities.items():
        if agent is not None and agent not in agent_of.get(aid, ()):
            continue
        if phase is not None and attrs.get("pcp:phase") != phase:
            continue
        if activity_type is not None and attrs.get("pcp:type") != activity_type:
            continue
        started = attrs.get("prov:startTime") or ""
        if time_from is not None and started < time_from:
            continue
        if time_to is not None and started > time_to:
            continue
        results.append(_activity_view(graph, aid))
    results.sort(key=lambda v: (v["prov:startTime"], v["store_seq"]))
    return results


def export_prov(store: ProvenanceStore, instance_id: str) -> ProvDocument:
    """Merge an instance's records into one importable document.

    Deterministic for a given log: node records are the final merged state,
    edges are the deduplicated union, and emitted_at is the appended_at of
    the instance's newest record.
    """
    records = store.instance_records(instance_id)
    merged = ProvGraph()
    for record in records:
        merged.add_document(record.document, record.store_seq)
    lo = min((r.source_seq[0] for r in records), default=0)
    hi = max((r.source_seq[1] for r in records), default=0)
    emitted_at = records[-1].appended_at if records else ""
    document_dict: dict[str, Any] = {
        "bundle": f"export:{instance_id}",
        "instance_id": instance_id,
        "source_seq": [lo, hi],
        "emitted_at": emitted_at,
        "entity": {k: merged.entities[k] for k in sorted(merged.entities)},
        "activity": {k: merged.activities[k] for k in sorted(merged.activities)},
        "agent": {k: merged.agents[k] for k in sorted(merged.agents)},
    }
    for kind in RelationKind:
        _, _, source_key, target_key = RELATION_SIGNATURES[kind]
        section: dict[str, Any] = {}
        index = 0
        for edge in merged.sorted_edges():
            if edge.kind != kind:
                continue
            index += 1
            entry: dict[str, Any] = {source_key: edge.source, target_key: edge.target}
            if edge.role is not None:
                entry["prov:role"] = edge.role
            if edge.at is not None:
                entry["prov:time"] = edge.at
            section[f"_:{kind.value}:{index}"] = entry
        document_dict[kind.value] = section
    return ProvDocument.from_dict(document_dict)


def import_prov(document: ProvDocument | dict[str, Any]) -> ProvGraph:
    """Build a standalone graph from one exported document."""
    if isinstance(document, dict):
        document = ProvDocument.from_dict(document)
    graph = ProvGraph()
    _validate_document(document, graph)
    graph.add_document(document, store_seq=1)
    return graph
