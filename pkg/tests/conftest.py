"""Shared fixtures and scripted scenario drivers."""

from __future__ import annotations

import random

import pytest

from pcp import DEFAULT_VERSION, LogicalClock, Runtime
from pcp.model import MetaMetaModel, parse_meta_meta_model, document_schema

PHASE_TOUR = [
    ("analysis", "challenges_opportunities_identification"),
    ("policy_creation", "formal_consultation"),
    ("implementation", "interagency_collaboration"),
    ("monitoring_evaluation", "monitoring"),
]


@pytest.fixture
def clock() -> LogicalClock:
    return LogicalClock("2024-03-01T09:00:00+00:00")


@pytest.fixture
def runtime(clock) -> Runtime:
    rt = Runtime(clock=clock)
    yield rt
    rt.close()


def run_full_cycle(rt: Runtime, actor: str = "alice") -> str:
    """Drive a default-model instance through all five phases; returns id."""
    engine = rt.engine
    instance = engine.create_instance(DEFAULT_VERSION, actor)
    iid = instance.id
    ex = engine.start_task(iid, "problem_identification", actor)
    engine.complete_task(iid, ex.exec_id, [f"{iid}-evidence"], actor)
    for target, task in PHASE_TOUR:
        decision = engine.request_phase_transition(iid, target)
        engine.resolve_decision(iid, decision.id, task, actor)
        ex = engine.start_task(iid, task, actor)
        engine.complete_task(iid, ex.exec_id, [f"{iid}-{task}-out"], actor)
    return iid


def loop_back_to_start(rt: Runtime, iid: str, actor: str = "alice") -> None:
    decision = rt.engine.loop_back(iid, "agenda_setting", actor, "issues resurfaced")
    rt.engine.resolve_decision(iid, decision.id, "problem_identification", actor)


def make_model(version: str, phases: list[dict], constraints: list[dict] | None = None) -> MetaMetaModel:
    """Build a validated model from shorthand phase specs.

    phases: [{"id", "tasks": {task_id: [precedence...]}, "mandatory": [...]}]
    """
    doc = {
        "version": version,
        "phases": [
            {
                "id": p["id"],
                "name": p["id"],
                "ordinal": i + 1,
                "entry_decision_required": p.get("entry_decision_required", True),
                "tasks": [
                    {
                        "id": task_id,
                        "name": task_id,
                        "subtasks": [],
                        "mandatory": task_id in p.get("mandatory", []),
                        "precedence": sorted(preds),
                        "external_consult_allowed": True,
                    }
                    for task_id, preds in p["tasks"].items()
                ],
            }
            for i, p in enumerate(phases)
        ],
        "phase_constraints": constraints or [],
        "schema": document_schema(),
    }
    model = parse_meta_meta_model(doc)
    assert isinstance(model, MetaMetaModel), f"fixture model invalid: {model}"
    return model


ACTORS = ["alice", "bob", "carol", "dana"]


def ensure_sim_stakeholders(rt: Runtime) -> list[str]:
    from pcp.routing import StakeholderAddress

    ids = []
    for i in range(3):
        sid = f"dept{i}"
        ids.append(sid)
        try:
            rt.connector.register_stakeholder(
                StakeholderAddress(sid, sid, sid, f"ep://{sid}")
            )
        except Exception:
            pass  # already registered for this runtime
    return ids


def random_walk(rt: Runtime, rng: random.Random, version: str, steps: int = 40) -> str:
    """Drive one instance with randomly chosen commands (mostly valid ones).

    Rejections are allowed; they exercise the CommandRejected path. Returns
    the instance id. Deterministic given the rng and the runtime's clock.
    """
    from pcp import PcpError
    from pcp.engine import TaskState

    engine = rt.engine
    stakeholders = ensure_sim_stakeholders(rt)
    instance = engine.create_instance(version, rng.choice(ACTORS))
    iid = instance.id
    model = rt.registry.get(version)
    artifact_n = 0

    for _ in range(steps):
        if instance.status.value != "Active":
            break
        if hasattr(rt.clock, "advance") and rng.random() < 0.5:
            rt.clock.advance(rng.choice([1, 5, 30]))
        actions: list[tuple] = []
        for d in instance.pending_decisions():
            for opt in d.options:
                actions.append(("resolve", d.id, opt))
        pe = instance.active_phase_execution()
        if pe is not None:
            for t in sorted(engine.ready_tasks(iid)):
                actions.append(("start", t))
                actions.append(("skip", t))
            for te in sorted(
                instance.iteration_executions(pe.phase_id, pe.iteration),
                key=lambda x: x.exec_id,
            ):
                if te.state == TaskState.IN_PROGRESS:
                    actions.append(("complete", te.exec_id))
                    actions.append(("dispatch", te.exec_id))
            actions.append(("transition", None))
            for p in model.phases:
                if p.id != pe.phase_id:
                    actions.append(("transition", p.id))
                if 1 <= instance.latest_iteration(p.id) < 3:
                    actions.append(("loopback", p.id))
        for token in instance.outstanding_tokens():
            actions.append(("respond", token.token_id))
        if rng.random() < 0.1:
            actions.append(("expire",))
        if not actions:
            break
        action = rng.choice(actions)
        actor = rng.choice(ACTORS)
        try:
            if action[0] == "resolve":
                engine.resolve_decision(iid, action[1], action[2], actor)
            elif action[0] == "start":
                engine.start_task(iid, action[1], actor)
            elif action[0] == "skip":
                engine.skip_task(iid, action[1], actor, "not needed")
            elif action[0] == "complete":
                artifact_n += 1
                outputs = [f"{iid}-art{artifact_n}"] if rng.random() < 0.7 else []
                engine.complete_task(iid, action[1], outputs, actor)
            elif action[0] == "dispatch":
                rt.connector.dispatch_token(
                    iid,
                    action[1],
                    rng.choice(stakeholders),
                    "background analysis",
                    "dataset",
                    deadline=rt.clock.at_offset(rng.choice([10, 60])),
                )
            elif action[0] == "respond":
                rt.connector.receive_response(
                    action[1], {"kind": "dataset", "content": "rows"}, actor
                )
            elif action[0] == "transition":
                engine.request_phase_transition(iid, action[1])
            elif action[0] == "loopback":
                engine.loop_back(iid, action[1], actor, "revisit")
            elif action[0] == "expire":
                engine.expire_tokens()
        except PcpError:
            pass
    return iid


def check_log_safety(events, model) -> None:
    """Log-level safety: precedence order and phase-order constraints."""
    from pcp.events import EventType

    terminal: set[tuple[str, int, str]] = set()
    completed_phases: set[str] = set()
    seen_seqs = []
    for event in events:
        seen_seqs.append(event.seq)
        p = event.payload
        if event.type == EventType.TASK_STARTED:
            preds = model.phase(p["phase_id"]).task(p["task_id"]).precedence
            for pred in preds:
                assert (p["phase_id"], p["iteration"], pred) in terminal, (
                    f"{p['task_id']} started before precedence {pred} "
                    f"was terminal in iteration {p['iteration']}"
                )
        elif event.type in (EventType.TASK_COMPLETED, EventType.TASK_SKIPPED):
            terminal.add((p["phase_id"], p["iteration"], p["task_id"]))
        elif event.type in (EventType.PHASE_ENTERED, EventType.LOOP_BACK):
            if p["iteration"] == 1 and event.type == EventType.PHASE_ENTERED:
                for c in model.phase_constraints:
                    if c.subject_phase == p["phase_id"]:
                        assert c.requires_phase in completed_phases, (
                            f"{p['phase_id']} entered before {c.requires_phase} completed"
                        )
        elif event.type == EventType.PHASE_COMPLETED:
            completed_phases.add(p["phase_id"])
    assert seen_seqs == list(range(1, len(seen_seqs) + 1)), "gap in event seqs"


def random_dag_model(rng: random.Random, version: str, max_phases: int = 4, max_tasks: int = 8) -> MetaMetaModel:
    """Random acyclic model: each task may require a subset of earlier tasks."""
    phases = []
    for p in range(rng.randint(1, max_phases)):
        n_tasks = rng.randint(1, max_tasks)
        tasks: dict[str, list[str]] = {}
        names = [f"p{p}t{t}" for t in range(n_tasks)]
        for i, name in enumerate(names):
            preds = [earlier for earlier in names[:i] if rng.random() < 0.4]
            tasks[name] = preds
        phases.append(
            {
                "id": f"phase{p}",
                "tasks": tasks,
                "mandatory": [n for n in names if rng.random() < 0.2],
                "entry_decision_required": rng.random() < 0.7,
            }
        )
    constraints = []
    for later in range(1, len(phases)):
        if rng.random() < 0.3:
            earlier = rng.randrange(later)
            constraints.append(
                {"subject": f"phase{later}", "requires": f"phase{earlier}"}
            )
    return make_model(version, phases, constraints)
