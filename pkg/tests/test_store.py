"""Recorder: durability, rebuild determinism, lineage, trail, query, round trip."""

import random

import pytest

from pcp import (
    LogicalClock,
    PcpError,
    ProvenanceStore,
    Runtime,
    import_prov,
    lineage,
    rebuild,
)
from pcp.prov import (
    ActivityType,
    AgentType,
    EntityKind,
    ProvActivity,
    ProvAgent,
    ProvDocument,
    ProvEntity,
    ProvRelation,
    RelationKind,
)
from pcp.store import export_prov
from conftest import loop_back_to_start, random_dag_model, random_walk, run_full_cycle

TS = "2024-01-01T00:00:00.000000+00:00"


def minimal_doc(bundle="b1", instance="pi-x", seq=1, entity="e1", activity="a1"):
    doc = ProvDocument(bundle=bundle, instance_id=instance, source_seq=(seq, seq), emitted_at=TS)
    doc.activities.append(
        ProvActivity(activity, ActivityType.TASK_EXECUTION, TS, TS, {"pcp:instance": instance})
    )
    doc.entities.append(ProvEntity(entity, EntityKind.ARTIFACT, TS))
    doc.agents.append(ProvAgent("alice", AgentType.PERSON))
    doc.relations.append(ProvRelation(RelationKind.WAS_GENERATED_BY, entity, activity, at=TS))
    doc.relations.append(ProvRelation(RelationKind.WAS_ASSOCIATED_WITH, activity, "alice"))
    return doc


class TestAppend:
    def test_store_seq_increments(self):
        store = ProvenanceStore()
        assert store.append(minimal_doc(seq=1)) == 1
        assert store.append(minimal_doc(bundle="b2", seq=2, entity="e2", activity="a2")) == 2

    def test_duplicate_key_is_idempotent(self):
        store = ProvenanceStore()
        first = store.append(minimal_doc())
        again = store.append(minimal_doc())
        assert first == again
        assert len(store.records) == 1

    def test_crash_restart_rebuilds_identical_graph(self, tmp_path):
        path = tmp_path / "prov.ndjson"
        store = ProvenanceStore(path)
        rng = random.Random(4)
        for i in range(1, 1001):
            doc = ProvDocument(
                bundle=f"b{i}", instance_id=f"pi-{rng.randint(1, 5)}",
                source_seq=(i, i), emitted_at=TS,
            )
            doc.entities.append(ProvEntity(f"e{i}", EntityKind.ARTIFACT, TS))
            doc.activities.append(
                ProvActivity(
                    f"a{i}", ActivityType.TASK_EXECUTION, TS, TS, {"pcp:instance": doc.instance_id}
                )
            )
            doc.relations.append(
                ProvRelation(RelationKind.WAS_GENERATED_BY, f"e{i}", f"a{i}", at=TS)
            )
            store.append(doc)
        before = store.graph.canonical_json()
        store.close()  # simulated crash boundary: nothing buffered survives anyway
        reopened = ProvenanceStore(path)
        assert reopened.graph.canonical_json() == before
        assert len(reopened.records) == 1000

    def test_rebuild_is_pure_function_of_log(self):
        store = ProvenanceStore()
        for i in range(1, 6):
            store.append(minimal_doc(bundle=f"b{i}", seq=i, entity=f"e{i}", activity=f"a{i}"))
        shuffled = list(store.records)
        random.Random(1).shuffle(shuffled)
        assert rebuild(shuffled).canonical_json() == store.graph.canonical_json()

    def test_empty_log_empty_graph(self):
        assert rebuild([]).canonical_json() == ProvenanceStore().graph.canonical_json()

    def test_single_task_bundle_counts(self, runtime):
        engine = runtime.engine
        instance = engine.create_instance("1.0.0", "alice")
        ex = engine.start_task(instance.id, "problem_identification", "alice")
        engine.complete_task(instance.id, ex.exec_id, ["artifact-1"], "alice")
        record = runtime.store.instance_records(instance.id)[-1]
        doc = record.document
        assert len(doc.activities) == 1
        assert len(doc.entities) >= 1
        assert len(doc.relations) >= 2


def random_prov_graph(rng: random.Random, n_nodes: int):
    """One closed document holding a random ancestor DAG plus agent edges.

    Node i may only point at nodes < i, so the graph is acyclic by
    construction; endpoint classes pick the PROV relation kind.
    """
    doc = ProvDocument(bundle="dag", instance_id="pi-dag", source_seq=(1, 1), emitted_at=TS)
    classes = {}
    for i in range(n_nodes):
        node_id = f"n{i}"
        if rng.random() < 0.5:
            classes[node_id] = "entity"
            doc.entities.append(ProvEntity(node_id, EntityKind.ARTIFACT, TS))
        else:
            classes[node_id] = "activity"
            doc.activities.append(ProvActivity(node_id, ActivityType.TASK_EXECUTION, TS, TS))
    kind_for = {
        ("entity", "activity"): RelationKind.WAS_GENERATED_BY,
        ("activity", "entity"): RelationKind.USED,
        ("entity", "entity"): RelationKind.WAS_DERIVED_FROM,
        ("activity", "activity"): RelationKind.WAS_INFORMED_BY,
    }
    ancestor_edges = []
    for i in range(1, n_nodes):
        for _ in range(rng.randint(0, 3)):
            j = rng.randrange(i)
            source, target = f"n{i}", f"n{j}"
            kind = kind_for[(classes[source], classes[target])]
            ancestor_edges.append((source, target, kind))
            doc.relations.append(ProvRelation(kind, source, target))
    for i in range(n_nodes):
        if rng.random() < 0.3:
            agent = f"agent{rng.randint(0, 3)}"
            if not any(a.id == agent for a in doc.agents):
                doc.agents.append(ProvAgent(agent, AgentType.PERSON))
            if classes[f"n{i}"] == "activity":
                doc.relations.append(
                    ProvRelation(RelationKind.WAS_ASSOCIATED_WITH, f"n{i}", agent)
                )
            else:
                doc.relations.append(
                    ProvRelation(RelationKind.WAS_ATTRIBUTED_TO, f"n{i}", agent)
                )
    return doc, classes, ancestor_edges


class TestLineage:
    def test_minimal_chain(self):
        store = ProvenanceStore()
        doc = minimal_doc()
        doc.entities.append(ProvEntity("input-1", EntityKind.DATASET, TS))
        doc.relations.append(ProvRelation(RelationKind.USED, "a1", "input-1", at=TS))
        store.append(doc)
        sub = store.lineage("e1")
        assert set(sub.entities) == {"e1", "input-1"}
        assert set(sub.activities) == {"a1"}
        kinds = sorted(e.kind.value for e in sub.edges.values())
        assert kinds == ["used", "wasAssociatedWith", "wasGeneratedBy"]

    def test_entity_with_no_generator(self):
        store = ProvenanceStore()
        doc = ProvDocument(bundle="b", instance_id="i", source_seq=(1, 1), emitted_at=TS)
        doc.entities.append(ProvEntity("orphan", EntityKind.COMMENT, TS))
        store.append(doc)
        sub = store.lineage("orphan")
        assert set(sub.entities) == {"orphan"}
        assert not sub.activities and not sub.edges

    def test_unknown_entity(self):
        store = ProvenanceStore()
        with pytest.raises(PcpError) as exc:
            store.lineage("nothing")
        assert exc.value.code == "unknown-entity"

    def test_random_dags_match_reverse_reachability_oracle(self):
        rng = random.Random(12)
        for _ in range(15):
            n = rng.randint(2, 200)
            doc, classes, ancestor_edges = random_prov_graph(rng, n)
            store = ProvenanceStore()
            store.append(doc)
            adjacency = {}
            for source, target, _ in ancestor_edges:
                adjacency.setdefault(source, set()).add(target)
            entities = [node for node, cls in classes.items() if cls == "entity"]
            if not entities:
                continue
            start = rng.choice(entities)
            # Independent BFS oracle over the same edge rules.
            expected = {start}
            frontier = [start]
            while frontier:
                node = frontier.pop()
                for nxt in adjacency.get(node, ()):
                    if nxt not in expected:
                        expected.add(nxt)
                        frontier.append(nxt)
            sub = lineage(store.graph, start)
            core_nodes = set(sub.entities) | set(sub.activities)
            assert core_nodes == expected
            expected_edges = {
                (s, t, k.value) for s, t, k in ancestor_edges if s in expected and t in expected
            }
            got_edges = {
                (e.source, e.target, e.kind.value)
                for e in sub.edges.values()
                if e.kind.value not in ("wasAssociatedWith", "wasAttributedTo")
            }
            assert got_edges == expected_edges
            # Agent attachments: exactly the agents of included nodes.
            for edge in sub.edges.values():
                if edge.kind.value in ("wasAssociatedWith", "wasAttributedTo"):
                    assert edge.source in expected


class TestAuditTrail:
    def test_full_cycle_trail_order(self, runtime):
        iid = run_full_cycle(runtime)
        runtime.engine.request_phase_transition(iid)  # completes the instance
        trail = runtime.store.audit_trail(iid)
        assert trail[0]["pcp:type"] == "InstanceCreation"
        assert trail[-1]["pcp:type"] == "PhaseTransition"
        seqs = [a["store_seq"] for a in trail]
        assert seqs == sorted(seqs)  # constant logical clock: store_seq breaks ties

    def test_unknown_instance_is_empty(self, runtime):
        assert runtime.store.audit_trail("pi-404") == []

    def test_loop_back_shows_two_iterations(self, runtime):
        iid = run_full_cycle(runtime)
        loop_back_to_start(runtime, iid)
        ex = runtime.engine.start_task(iid, "problem_identification", "alice")
        runtime.engine.complete_task(iid, ex.exec_id, [], "alice")
        trail = runtime.store.audit_trail(iid)
        agenda_iters = {
            a.get("pcp:iteration")
            for a in trail
            if a.get("pcp:phase") == "agenda_setting" and a["pcp:type"] == "TaskExecution"
        }
        assert agenda_iters == {1, 2}


class TestQuery:
    def _populated(self, runtime):
        iid = run_full_cycle(runtime)
        return runtime.store, iid

    def test_agent_filter_matches_association_oracle(self, runtime):
        store, _ = self._populated(runtime)
        results = store.query(agent="alice")
        graph = store.graph
        expected = {
            e.source
            for e in graph.edges.values()
            if e.kind == RelationKind.WAS_ASSOCIATED_WITH and e.target == "alice"
        }
        assert {a["id"] for a in results} == expected

    def test_empty_filter_returns_everything(self, runtime):
        store, _ = self._populated(runtime)
        assert len(store.query()) == len(store.graph.activities)

    def test_conjunction_is_intersection(self, runtime):
        store, _ = self._populated(runtime)
        phase_only = {a["id"] for a in store.query(phase="analysis")}
        type_only = {a["id"] for a in store.query(activity_type="PhaseTransition")}
        both = {a["id"] for a in store.query(phase="analysis", activity_type="PhaseTransition")}
        assert both == phase_only & type_only
        assert both  # the scripted run enters and leaves analysis

    def test_time_range(self):
        clock = LogicalClock("2024-05-05T00:00:00+00:00")
        rt = Runtime(clock=clock)
        iid = rt.engine.create_instance("1.0.0", "alice").id
        clock.advance(100)
        ex = rt.engine.start_task(iid, "problem_identification", "alice")
        results = rt.store.query(time_from="2024-05-05T00:01:00+00:00")
        assert {a["id"] for a in results} == {f"act:task:{ex.exec_id}"}


class TestExportImport:
    def test_round_trip_multiset_equality(self, runtime):
        iid = run_full_cycle(runtime)
        loop_back_to_start(runtime, iid)
        document = export_prov(runtime.store, iid)
        imported = import_prov(document)
        merged = rebuild(runtime.store.instance_records(iid))
        assert imported.canonical_json() == merged.canonical_json()

    def test_round_trip_through_json_text(self, runtime):
        iid = run_full_cycle(runtime)
        document = export_prov(runtime.store, iid)
        from pcp.events import canonical_json
        import json

        text = canonical_json(document.to_dict())
        imported = import_prov(json.loads(text))
        merged = rebuild(runtime.store.instance_records(iid))
        assert imported.canonical_json() == merged.canonical_json()

    def test_import_with_dangling_relation(self):
        doc = minimal_doc().to_dict()
        doc["used"] = {"_:used:1": {"prov:activity": "a1", "prov:entity": "missing"}}
        with pytest.raises(PcpError) as exc:
            import_prov(doc)
        assert exc.value.code == "invalid-document"

    def test_export_empty_instance(self, runtime):
        document = export_prov(runtime.store, "pi-ghost")
        assert document.source_seq == (0, 0)
        imported = import_prov(document)
        assert not imported.entities and not imported.activities


class TestRuntimeRestart:
    def test_state_dir_restart_preserves_engine_and_graph(self, tmp_path):
        clock = LogicalClock("2024-02-02T00:00:00+00:00")
        rt = Runtime(state_dir=tmp_path, clock=clock)
        iid = run_full_cycle(rt)
        live_snapshot = rt.engine.instance(iid).canonical_json()
        live_graph = rt.store.graph.canonical_json()
        rt.close()
        rt2 = Runtime(state_dir=tmp_path, clock=LogicalClock("2024-02-03T00:00:00+00:00"))
        assert rt2.engine.instance(iid).canonical_json() == live_snapshot
        assert rt2.store.graph.canonical_json() == live_graph
        # The revived instance keeps working.
        decision = rt2.engine.loop_back(iid, "agenda_setting", "alice", "continue")
        rt2.engine.resolve_decision(iid, decision.id, "problem_identification", "alice")
        assert rt2.engine.ready_tasks(iid) == {"problem_identification"}
        rt2.close()

    def test_heals_missing_prov_records_on_restart(self, tmp_path):
        rt = Runtime(state_dir=tmp_path, clock=LogicalClock())
        iid = run_full_cycle(rt)
        expected_records = len(rt.store.records)
        rt.close()
        # Crash between event append and provenance append: drop the tail.
        prov_path = tmp_path / "prov.ndjson"
        lines = prov_path.read_text().strip().splitlines()
        prov_path.write_text("\n".join(lines[:-2]) + "\n")
        rt2 = Runtime(state_dir=tmp_path, clock=LogicalClock())
        assert len(rt2.store.records) == expected_records
        trail = rt2.store.audit_trail(iid)
        assert trail[0]["pcp:type"] == "InstanceCreation"
        rt2.close()

    def test_instance_walks_survive_restart(self, tmp_path):
        rng = random.Random(77)
        clock = LogicalClock()
        rt = Runtime(state_dir=tmp_path, clock=clock)
        rt.registry.register(random_dag_model(rng, "0.9.0"))
        # Persisting registered models requires going through the runtime.
        ids = [random_walk(rt, rng, "1.0.0", steps=15) for _ in range(3)]
        snapshots = {i: rt.engine.instance(i).canonical_json() for i in ids}
        rt.close()
        rt2 = Runtime(state_dir=tmp_path, clock=LogicalClock())
        for iid, snapshot in snapshots.items():
            assert rt2.engine.instance(iid).canonical_json() == snapshot
        rt2.close()
